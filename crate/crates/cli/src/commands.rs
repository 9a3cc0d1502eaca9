use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use lesionuq_core::lesion::{candidate_lesions, ground_truth_lesions};
use lesionuq_core::measures::compute_measure;
use lesionuq_core::metrics::match_lesions;
use lesionuq_core::phantom::{generate_scene, scene_statistics};
use lesionuq_core::roc::{roc_sweep, EvalScan, Level, RocTable, Stratum};
use lesionuq_core::scene::{self, write_atomic, SceneData};
use lesionuq_core::toynet::{self, ToyNet};
use lesionuq_core::uvol::{decode_volume, encode_volume};
use lesionuq_core::{mean_prediction, LabelMask, LesionSet, MatchResult, Measure, VoxelGrid};

use crate::config::{self, GenerateConfig, ToyConfig};

pub const GT_LESIONS_FILE: &str = "gt_lesions.json";
pub const ROC_CSV_FILE: &str = "roc.csv";
pub const ROC_JSON_FILE: &str = "roc.json";
pub const STATS_FILE: &str = "stats.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const IMAGE_FILE: &str = "image.uvol";
pub const LABELS_FILE: &str = "labels.uvol";
pub const NOISY_FILE: &str = "noisy.uvol";

pub fn map_file(measure: Measure) -> String {
    format!("unc_{}.uvol", measure.name())
}

pub fn detect_file(theta: f64) -> String {
    format!("detect_theta_{theta}.json")
}

/// What a command did, for its manifest.
#[derive(Debug)]
pub struct Outcome {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn put(path: PathBuf, bytes: &[u8], outputs: &mut Vec<PathBuf>) -> Result<()> {
    write_atomic(&path, bytes)?;
    outputs.push(path);
    Ok(())
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_volume(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn check_thetas(thetas: &[f64]) -> Result<()> {
    ensure!(!thetas.is_empty(), "at least one theta is required");
    if let Some(t) = thetas.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        bail!("theta {t} outside [0, 1]");
    }
    Ok(())
}

/// Runs `f` over scene directories in parallel and concatenates the outputs
/// in scene order.
fn per_scene<F>(scenes: &[PathBuf], f: F) -> Result<Vec<PathBuf>>
where
    F: Fn(&Path) -> Result<Vec<PathBuf>> + Sync,
{
    Ok(scenes
        .par_iter()
        .map(|dir| f(dir).with_context(|| format!("scene {}", dir.display())))
        .collect::<Result<Vec<_>>>()?
        .concat())
}

pub fn generate(config_path: Option<&Path>, seed: Option<u64>, scenes: Option<usize>, out: &Path) -> Result<Outcome> {
    let mut cfg: GenerateConfig = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = scenes {
        cfg.scenes = n;
    }
    ensure!(cfg.scenes >= 1, "scene count must be at least 1");
    cfg.phantom(0).validate()?;
    create_dir(out)?;

    // A single scene goes straight into `out`.
    let dirs: Vec<PathBuf> = if cfg.scenes == 1 {
        vec![out.to_path_buf()]
    } else {
        (0..cfg.scenes).map(|k| out.join(format!("scene_{k:03}"))).collect()
    };
    let outputs = dirs
        .par_iter()
        .enumerate()
        .map(|(k, dir)| {
            let phantom = cfg.phantom(k);
            let scene: SceneData = generate_scene(&phantom)
                .with_context(|| format!("generating scene {k} (seed {})", phantom.seed))?
                .into();
            create_dir(dir)?;
            let mut outs = Vec::new();
            for (name, bytes) in scene::encode_scene(&scene.gt_mask, &scene.stack, scene.provenance.as_ref())? {
                put(dir.join(name), &bytes, &mut outs)?;
            }
            Ok(outs)
        })
        .collect::<Result<Vec<_>>>()?
        .concat();

    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        seeds: cfg.scene_seeds(),
        inputs: config_path.into_iter().map(Path::to_path_buf).collect(),
        outputs,
    })
}

pub fn uncertainty(scenes: &[PathBuf], measures: &[Measure]) -> Result<Outcome> {
    ensure!(!measures.is_empty(), "at least one measure is required");
    let outputs = per_scene(scenes, |dir| {
        let stack = scene::load_stack(dir)?;
        let mut outs = Vec::new();
        for &m in measures {
            let grid = compute_measure(&stack, m).with_context(|| format!("computing {m}"))?;
            put(dir.join(map_file(m)), &encode_volume(&grid)?, &mut outs)?;
        }
        Ok(outs)
    })?;
    Ok(Outcome {
        config: json!({ "measures": measures.iter().map(|m| m.name()).collect::<Vec<_>>() }),
        seeds: Vec::new(),
        inputs: scenes.to_vec(),
        outputs,
    })
}

#[derive(Serialize)]
struct DetectReport<'a> {
    theta: f64,
    candidates: &'a LesionSet,
    matching: &'a MatchResult,
}

pub fn detect(scenes: &[PathBuf], thetas: &[f64]) -> Result<Outcome> {
    check_thetas(thetas)?;
    let outputs = per_scene(scenes, |dir| {
        let gt = ground_truth_lesions(&scene::load_ground_truth(dir)?);
        let mean = mean_prediction(&scene::load_stack(dir)?);
        let mut outs = Vec::new();
        put(dir.join(GT_LESIONS_FILE), &pretty_json(&gt)?, &mut outs)?;
        for &theta in thetas {
            let candidates = candidate_lesions(&mean, theta)?;
            let matching = match_lesions(&candidates, &gt)?;
            let report = DetectReport { theta, candidates: &candidates, matching: &matching };
            put(dir.join(detect_file(theta)), &pretty_json(&report)?, &mut outs)?;
        }
        Ok(outs)
    })?;
    Ok(Outcome {
        config: json!({ "thetas": thetas }),
        seeds: Vec::new(),
        inputs: scenes.to_vec(),
        outputs,
    })
}

/// Loads a scene for evaluation. Uncertainty maps are read from disk, never
/// recomputed.
fn load_eval_scan(dir: &Path, measures: &[Measure]) -> Result<EvalScan> {
    let gt = scene::load_ground_truth(dir)?;
    let maps = measures
        .iter()
        .map(|&m| {
            let path = dir.join(map_file(m));
            if !path.is_file() {
                bail!("missing uncertainty map {} (run `lesionuq uncertainty` first)", path.display());
            }
            Ok((m, load_grid(&path)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mean = mean_prediction(&scene::load_stack(dir)?);
    Ok(EvalScan::new(gt, mean, maps)?)
}

pub struct EvaluateArgs<'a> {
    pub scenes: &'a [PathBuf],
    pub measures: &'a [Measure],
    pub etas: &'a [f64],
    pub thetas: &'a [f64],
    pub level: Level,
    pub bins: &'a [Stratum],
    pub out: &'a Path,
}

pub fn evaluate(a: &EvaluateArgs<'_>) -> Result<Outcome> {
    ensure!(!a.measures.is_empty(), "at least one measure is required");
    ensure!(!a.scenes.is_empty(), "at least one scene is required");
    check_thetas(a.thetas)?;
    let scans = a
        .scenes
        .par_iter()
        .map(|dir| load_eval_scan(dir, a.measures).with_context(|| format!("scene {}", dir.display())))
        .collect::<Result<Vec<_>>>()?;

    let mut table = RocTable::default();
    for &m in a.measures {
        table.extend(roc_sweep(&scans, m, a.level, a.etas, a.thetas)?);
    }
    table.rows.retain(|r| a.bins.contains(&r.bin));

    create_dir(a.out)?;
    let mut outputs = Vec::new();
    put(a.out.join(ROC_CSV_FILE), table.to_csv().as_bytes(), &mut outputs)?;
    let mut json = table.to_json()?.into_bytes();
    json.push(b'\n');
    put(a.out.join(ROC_JSON_FILE), &json, &mut outputs)?;

    Ok(Outcome {
        config: json!({
            "measures": a.measures.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "etas": a.etas,
            "thetas": a.thetas,
            "level": a.level.name(),
            "bins": a.bins.iter().map(|b| b.name()).collect::<Vec<_>>(),
        }),
        seeds: Vec::new(),
        inputs: a.scenes.to_vec(),
        outputs,
    })
}

pub fn train_toy(config_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Outcome> {
    let mut cfg: ToyConfig = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let split = toynet::noisy_clean_image(cfg.side, cfg.image_seed())?;
    let data = split.dataset(cfg.patch_radius)?;
    let side = 2 * cfg.patch_radius + 1;
    let net = ToyNet::new(side * side, &cfg.hidden, cfg.dropout, cfg.init_seed())?;
    let (net, trace) = toynet::train(&net, &data, &cfg.train_config())?;

    create_dir(out)?;
    let dims = split.image.dims();
    let labels = LabelMask::new(dims, split.labels.iter().map(|&l| l > 0.5).collect())?;
    let noisy = LabelMask::new(dims, split.noisy.clone())?;
    let mut outputs = Vec::new();
    put(out.join(WEIGHTS_FILE), &toynet::encode_weights(&net)?, &mut outputs)?;
    put(out.join(LOSS_FILE), toynet::loss_trace_csv(&trace).as_bytes(), &mut outputs)?;
    put(out.join(IMAGE_FILE), &encode_volume(&split.image)?, &mut outputs)?;
    put(out.join(LABELS_FILE), &encode_volume(&labels.to_grid())?, &mut outputs)?;
    put(out.join(NOISY_FILE), &encode_volume(&noisy.to_grid())?, &mut outputs)?;

    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        seeds: vec![cfg.seed],
        inputs: config_path.into_iter().map(Path::to_path_buf).collect(),
        outputs,
    })
}

pub struct PredictArgs<'a> {
    pub weights: &'a Path,
    pub image: &'a Path,
    pub samples: usize,
    pub seed: u64,
    pub gt: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn predict_toy(a: &PredictArgs<'_>) -> Result<Outcome> {
    let bytes = fs::read(a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let net = toynet::decode_weights(&bytes).with_context(|| format!("decoding {}", a.weights.display()))?;
    let image = load_grid(a.image)?;
    let stack = toynet::mc_predict(&net, &image, a.samples, a.seed)?;

    create_dir(a.out)?;
    let mut outputs = Vec::new();
    let mut inputs = vec![a.weights.to_path_buf(), a.image.to_path_buf()];
    if let Some(gt) = a.gt {
        let mask = LabelMask::from_grid(&load_grid(gt)?)?;
        ensure!(mask.dims() == image.dims(), "ground truth {} does not match the image dims", gt.display());
        put(a.out.join(scene::GT_FILE), &encode_volume(&mask.to_grid())?, &mut outputs)?;
        inputs.push(gt.to_path_buf());
    }
    for (t, p) in stack.predictions().iter().enumerate() {
        put(a.out.join(scene::sample_file(t)), &encode_volume(p)?, &mut outputs)?;
    }
    for (t, v) in stack.variances().into_iter().flatten().enumerate() {
        put(a.out.join(scene::variance_file(t)), &encode_volume(v)?, &mut outputs)?;
    }

    Ok(Outcome {
        config: json!({ "samples": a.samples }),
        seeds: vec![a.seed],
        inputs,
        outputs,
    })
}

pub fn stats(scenes: &[PathBuf], out: &Path) -> Result<Outcome> {
    ensure!(!scenes.is_empty(), "at least one scene is required");
    let loaded = scenes
        .par_iter()
        .map(|dir| {
            let load = || Ok::<_, anyhow::Error>((scene::load_ground_truth(dir)?, scene::load_stack(dir)?));
            load().with_context(|| format!("scene {}", dir.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = scene_statistics(loaded.iter().map(|(gt, stack)| (gt, stack)))?;

    create_dir(out)?;
    let mut outputs = Vec::new();
    put(out.join(STATS_FILE), &pretty_json(&summary)?, &mut outputs)?;
    Ok(Outcome { config: json!({}), seeds: Vec::new(), inputs: scenes.to_vec(), outputs })
}
