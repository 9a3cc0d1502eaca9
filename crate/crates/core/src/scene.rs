//! Scene directories: `gt.uvol`, `sample_000.uvol` ..., optional
//! `var_000.uvol` ..., optional `provenance.json`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::{PhantomScene, Provenance};
use crate::uvol::{decode_volume, encode_volume};
use crate::volume::{GridKind, LabelMask, SampleStack};

pub const GT_FILE: &str = "gt.uvol";
pub const PROVENANCE_FILE: &str = "provenance.json";

pub fn sample_file(t: usize) -> String {
    format!("sample_{t:03}.uvol")
}

pub fn variance_file(t: usize) -> String {
    format!("var_{t:03}.uvol")
}

#[derive(Debug, Clone)]
pub struct SceneData {
    pub gt_mask: LabelMask,
    pub stack: SampleStack,
    pub provenance: Option<Provenance>,
}

impl From<PhantomScene> for SceneData {
    fn from(s: PhantomScene) -> Self {
        SceneData { gt_mask: s.gt_mask, stack: s.stack, provenance: Some(s.provenance) }
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Every file a scene occupies, in write order, with its bytes.
pub fn encode_scene(
    gt_mask: &LabelMask,
    stack: &SampleStack,
    provenance: Option<&Provenance>,
) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![(GT_FILE.to_string(), encode_volume(&gt_mask.to_grid())?)];
    for (t, p) in stack.predictions().iter().enumerate() {
        files.push((sample_file(t), encode_volume(p)?));
    }
    for (t, v) in stack.variances().into_iter().flatten().enumerate() {
        files.push((variance_file(t), encode_volume(v)?));
    }
    if let Some(p) = provenance {
        let mut json = serde_json::to_vec_pretty(p)?;
        json.push(b'\n');
        files.push((PROVENANCE_FILE.to_string(), json));
    }
    Ok(files)
}

pub fn save_scene(scene: &SceneData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in encode_scene(&scene.gt_mask, &scene.stack, scene.provenance.as_ref())? {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_grid(path: &Path) -> Result<crate::volume::VoxelGrid> {
    decode_volume(&read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_ground_truth(dir: &Path) -> Result<LabelMask> {
    let path = dir.join(GT_FILE);
    if !path.is_file() {
        return Err(Error::MissingInput(format!("{} not found", path.display())));
    }
    LabelMask::from_grid(&load_grid(&path)?)
}

/// Loads samples numbered contiguously from 0. Variances are taken only when
/// a file exists for every sample.
pub fn load_stack(dir: &Path) -> Result<SampleStack> {
    let mut predictions = Vec::new();
    while dir.join(sample_file(predictions.len())).is_file() {
        let g = load_grid(&dir.join(sample_file(predictions.len())))?;
        if g.kind() != GridKind::Probability {
            return Err(Error::Format(format!(
                "{} holds a {:?} grid, expected probabilities",
                sample_file(predictions.len()),
                g.kind()
            )));
        }
        predictions.push(g);
    }
    if predictions.is_empty() {
        return Err(Error::MissingInput(format!(
            "{} not found",
            dir.join(sample_file(0)).display()
        )));
    }
    let present = (0..predictions.len()).filter(|&t| dir.join(variance_file(t)).is_file()).count();
    let variances = match present {
        0 => None,
        n if n == predictions.len() => Some(
            (0..n)
                .map(|t| load_grid(&dir.join(variance_file(t))))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => {
            let missing = (0..predictions.len())
                .find(|&t| !dir.join(variance_file(t)).is_file())
                .expect("some variance file is absent");
            return Err(Error::MissingInput(format!(
                "{} not found",
                dir.join(variance_file(missing)).display()
            )));
        }
    };
    SampleStack::new(predictions, variances)
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let gt_mask = load_ground_truth(dir)?;
    let stack = load_stack(dir)?;
    crate::volume::check_dims(gt_mask.dims(), stack.dims())?;
    let prov_path = dir.join(PROVENANCE_FILE);
    let provenance = if prov_path.is_file() {
        Some(serde_json::from_slice(&read(&prov_path)?)?)
    } else {
        None
    };
    Ok(SceneData { gt_mask, stack, provenance })
}
