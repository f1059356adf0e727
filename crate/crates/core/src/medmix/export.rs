use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::imaging::{save_mask_png, save_png};

use super::{AugmentedSample, MedMixError};

#[derive(Serialize)]
struct ManifestLine<'a> {
    source_id: &'a str,
    class_index: usize,
    view_index: usize,
    mask_path: String,
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `dir`.
pub fn export_corpus(samples: &[AugmentedSample], dir: &Path) -> Result<(), MedMixError> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{:06}_{}_v{}", i, s.source_id, s.view_index);
        save_png(&dir.join("images").join(format!("{stem}.png")), &s.image)?;
        let mask_path = format!("masks/{stem}.png");
        save_mask_png(&dir.join(&mask_path), &s.lesion_mask)?;
        let line = ManifestLine {
            source_id: &s.source_id,
            class_index: s.class_index,
            view_index: s.view_index,
            mask_path,
        };
        writeln!(manifest, "{}", serde_json::to_string(&line).expect("manifest line"))?;
    }
    Ok(())
}
