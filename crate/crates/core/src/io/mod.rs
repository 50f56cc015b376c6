pub mod image_io;
pub mod ply;

use std::path::{Path, PathBuf};

use crate::camera::Camera;
use crate::error::{Error, Result};

pub use image_io::{read_image, write_image};

pub fn read_camera(path: &Path) -> Result<Camera> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: format!("camera {}", path.display()),
        offset: byte_offset(&text, e.line(), e.column()),
        msg: e.to_string(),
    })
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    let text = serde_json::to_string_pretty(cam)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Converts serde_json's 1-based line/column into a byte offset.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

/// Camera file name for view `index` inside a dataset directory.
pub fn camera_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("cam_{index:03}.json"))
}

pub fn image_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("cam_{index:03}.png"))
}

/// Sorted list of `cam_*.json` files in `dir`.
pub fn list_cameras(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("cam_"))
        })
        .collect();
    out.sort();
    Ok(out)
}
