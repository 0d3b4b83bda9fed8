use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{CocoDocument, Dataset};
use crate::error::{Result, WssisError};
use crate::image::RgbImage;

/// Parses and validates a document. `context` names the source in errors.
pub fn parse_document(text: &str, context: &str) -> Result<CocoDocument> {
    let doc: CocoDocument = serde_json::from_str(text).map_err(|e| WssisError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    doc.validate()?;
    Ok(doc)
}

pub fn read_document(path: &Path) -> Result<CocoDocument> {
    let text = fs::read_to_string(path).map_err(|e| WssisError::io(path.display().to_string(), e))?;
    parse_document(&text, &path.display().to_string())
}

pub fn write_document(doc: &CocoDocument, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| WssisError::io(dir.display().to_string(), e))?;
    }
    let text = serde_json::to_string_pretty(doc).expect("document serializes");
    fs::write(path, text + "\n").map_err(|e| WssisError::io(path.display().to_string(), e))
}

/// Reads the document at `path` and the PNG of every image, resolved
/// relative to the document's directory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let doc = read_document(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pixels = BTreeMap::new();
    for info in &doc.images {
        let img = RgbImage::load_png(&base.join(&info.file_name))?;
        if (img.width(), img.height()) != (info.width, info.height) {
            return Err(WssisError::Integrity(format!(
                "image {} is {}x{} on disk but {}x{} in the document",
                info.id,
                img.width(),
                img.height(),
                info.width,
                info.height
            )));
        }
        pixels.insert(info.id, img);
    }
    Ok(Dataset { doc, pixels })
}

/// Writes the document and every available image next to it.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_document(&dataset.doc, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for info in &dataset.doc.images {
        if let Some(img) = dataset.pixels.get(&info.id) {
            let target = base.join(&info.file_name);
            if let Some(dir) = target.parent() {
                fs::create_dir_all(dir).map_err(|e| WssisError::io(dir.display().to_string(), e))?;
            }
            img.save_png(&target)?;
        }
    }
    Ok(())
}
