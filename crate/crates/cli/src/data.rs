//! Loading sequences and pair corpora from disk.

use std::path::{Path, PathBuf};

use detail_core::normal_map::{read_sequence, SequenceMeta, META_FILE};
use detail_core::procedural::{read_pair_sequence, LoadedPairs, FINE_DIR};
use detail_core::{MaterialLabel, NormalMapFrame};

use crate::CliError;

/// Pair-sequence directories under `root`: `root` itself when it holds a
/// `fine/` sequence, otherwise its immediate subdirectories that do.
pub fn pair_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if root.join(FINE_DIR).join(META_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(FINE_DIR).join(META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("{} holds no pair sequences", root.display())));
    }
    Ok(dirs)
}

pub struct LabelledPairs {
    pub label: MaterialLabel,
    pub pairs: LoadedPairs,
}

pub fn load_labelled_pairs(roots: &[PathBuf], vocabulary: &[String]) -> Result<Vec<LabelledPairs>, CliError> {
    let mut out = Vec::new();
    for root in roots {
        for dir in pair_dirs(root)? {
            let pairs = read_pair_sequence(&dir)?;
            let name = pairs
                .material
                .clone()
                .ok_or_else(|| CliError::Data(format!("{} has no material label", dir.display())))?;
            let label = MaterialLabel::from_name(&name, vocabulary)?;
            out.push(LabelledPairs { label, pairs });
        }
    }
    Ok(out)
}

/// Reads a sequence and resamples it to `pixels_per_meter` when needed.
pub fn load_at_density(dir: &Path, pixels_per_meter: f64) -> Result<(SequenceMeta, Vec<NormalMapFrame>), CliError> {
    let (meta, frames) = read_sequence(dir)?;
    let frames = frames
        .into_iter()
        .map(|f| to_density(f, pixels_per_meter))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((meta, frames))
}

pub fn to_density(frame: NormalMapFrame, pixels_per_meter: f64) -> Result<NormalMapFrame, CliError> {
    if (frame.pixels_per_meter - pixels_per_meter).abs() <= 1e-9 * pixels_per_meter {
        Ok(frame)
    } else {
        Ok(frame.resize_to_scale(pixels_per_meter)?)
    }
}
