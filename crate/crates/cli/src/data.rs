//! Dataset directories: PGM images plus an optional `labels.csv`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use otml_core::pipeline::{load_pgm, save_pgm, PhantomSample};
use otml_core::trainer::LabeledSet;
use otml_core::Tensor;

pub const LABELS_FILE: &str = "labels.csv";
const LABELS_HEADER: &str = "filename,label";

pub fn write_dataset(dir: &Path, samples: &[PhantomSample], bits: u32) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let width = samples.len().saturating_sub(1).to_string().len().max(4);
    let mut labels = String::from(LABELS_HEADER);
    labels.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let name = format!("img_{i:0width$}.pgm");
        save_pgm(&dir.join(&name), &s.image, bits)?;
        labels.push_str(&format!("{name},{}\n", s.label));
    }
    let path = dir.join(LABELS_FILE);
    fs::write(&path, labels).with_context(|| format!("writing {}", path.display()))
}

fn read_labels(dir: &Path) -> Result<Option<Vec<(String, usize)>>> {
    let path = dir.join(LABELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == LABELS_HEADER) {
            continue;
        }
        let Some((name, label)) = line.rsplit_once(',') else {
            bail!("{}:{}: expected `filename,label`", path.display(), n + 1);
        };
        let label = label.trim().parse().with_context(|| format!("{}:{}: bad label `{label}`", path.display(), n + 1))?;
        rows.push((name.trim().to_string(), label));
    }
    Ok(Some(rows))
}

/// Images in `labels.csv` order, or every `*.pgm` in name order when there is no label file.
pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let names = match read_labels(dir)? {
        Some(rows) => rows.into_iter().map(|(n, _)| n).collect(),
        None => {
            let mut names = Vec::new();
            for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if name.ends_with(".pgm") {
                    names.push(name);
                }
            }
            names.sort();
            names
        }
    };
    if names.is_empty() {
        bail!("no images found in {}", dir.display());
    }
    names.iter().map(|n| load_pgm(&dir.join(n)).map_err(Into::into)).collect()
}

pub fn load_labeled(dir: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let Some(rows) = read_labels(dir)? else {
        bail!("{} has no {LABELS_FILE}", dir.display());
    };
    if rows.is_empty() {
        bail!("{} lists no images", dir.join(LABELS_FILE).display());
    }
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (name, label) in rows {
        images.push(load_pgm(&dir.join(&name))?);
        labels.push(label);
    }
    Ok((images, labels))
}

pub fn labeled_set(images: &[Tensor], labels: Vec<usize>, num_classes: usize) -> Result<LabeledSet> {
    Ok(LabeledSet { images: Tensor::stack(images)?, labels, num_classes })
}
