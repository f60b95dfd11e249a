//! Inpainting hand-off. `avp` exports the anchor render, inverted depth and
//! projected box mask next to `anchor.json`; an external inpainter adds
//! `inpainted.png` and `foreground_mask.png` to the same directory.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use splatedit::optimize::AnchorTarget;
use splatedit::scene::Camera;
use splatedit::{Error, Image, Result};

pub const RECORD: &str = "anchor.json";
pub const RENDER: &str = "render.png";
pub const DEPTH: &str = "depth.png";
pub const BBOX_MASK: &str = "bbox_mask.png";
pub const INPAINTED: &str = "inpainted.png";
pub const FOREGROUND_MASK: &str = "foreground_mask.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorRecord {
    pub anchor_index: usize,
    pub azimuth_deg: f64,
    pub ratio: f64,
    pub contrast: f64,
    pub best_rotation: f64,
    pub camera: Camera,
    pub center: [f64; 3],
    pub up: [f64; 3],
}

pub fn export(dir: &Path, record: &AnchorRecord, render: &Image, inverted_depth: &Image, bbox_mask: &Image) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(RECORD);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    render.save_png8(&dir.join(RENDER))?;
    inverted_depth.save_png16(&dir.join(DEPTH), 0.0, 1.0)?;
    bbox_mask.save_png8(&dir.join(BBOX_MASK))
}

#[derive(Debug, Clone)]
pub struct InpaintBundle {
    pub record: AnchorRecord,
    /// Full inpainted frame.
    pub inpainted: Image,
    pub foreground_mask: Image,
}

impl InpaintBundle {
    pub fn import(dir: &Path) -> Result<Self> {
        let path = dir.join(RECORD);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: AnchorRecord = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let inpainted = Image::load_png(&dir.join(INPAINTED), 3)?;
        let foreground_mask = Image::load_png(&dir.join(FOREGROUND_MASK), 1)?;
        let (w, h) = (record.camera.width(), record.camera.height());
        for (name, img) in [(INPAINTED, &inpainted), (FOREGROUND_MASK, &foreground_mask)] {
            if (img.width(), img.height()) != (w, h) {
                return Err(Error::invalid(format!(
                    "{name} is {}x{}, the exported anchor view is {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
        }
        Ok(Self {
            record,
            inpainted,
            foreground_mask,
        })
    }

    /// The coarse-stage target: the inpainted foreground over black.
    pub fn target(&self) -> Result<AnchorTarget> {
        let target = AnchorTarget {
            camera: self.record.camera,
            foreground_rgb: self.inpainted.mul_mask(&self.foreground_mask)?,
            foreground_mask: self.foreground_mask.clone(),
            center: Vector3::from(self.record.center),
            up: Vector3::from(self.record.up),
        };
        target.validate()?;
        Ok(target)
    }
}
