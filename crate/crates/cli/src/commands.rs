use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use resdiff::config::RunConfig;
use resdiff::diffusion::{DiffusionConfig, OracleDenoiser, RespacedSchedule};
use resdiff::eval::{self, MetricsReport};
use resdiff::io::{self, Manifest, SceneRecord, MANIFEST_FILE, TEST_FILE, TRAIN_FILE};
use resdiff::rdt::{load_checkpoint, save_checkpoint, Ablation, CheckpointHeader, RdtError, RdtModel};
use resdiff::signal::PairedSegment;
use resdiff::synth::{self, Split};
use resdiff::train::{self, EpochRecord, TrainError, Trainer};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{svg, Classify, Common, Kind, Outcome};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn load_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).config()?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn config_hash(cfg: &RunConfig) -> String {
    sha256(cfg.to_json().as_bytes())
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).data()
}

fn parent_dir(path: &Path) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn simulate(common: &Common, out: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
    create_dir(&dir)?;
    if cfg.paths.write_cubes {
        create_dir(&dir.join("cubes"))?;
    }
    let train_scenes = cfg.scenes(Split::Train);
    let test_scenes = cfg.scenes(Split::Test);
    let jobs: Vec<(Split, usize, &synth::SceneConfig)> = train_scenes
        .iter()
        .map(|s| (Split::Train, s))
        .chain(test_scenes.iter().map(|s| (Split::Test, s)))
        .enumerate()
        .map(|(id, (split, s))| (split, id, s))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(split, id, scene)| -> Outcome<(SceneRecord, Vec<PairedSegment>)> {
            let rendered = synth::render_scene(scene).with_context(|| format!("scene {id}")).config()?;
            let pairs = synth::pairs_from_rendered(id, &rendered, &cfg.segmentation, &cfg.pipeline).data()?;
            let cube = if cfg.paths.write_cubes {
                let name = format!("cubes/{}_{id:04}.bin", split.name());
                io::write_cube(&dir.join(&name), &rendered.cube).data()?;
                Some(name)
            } else {
                None
            };
            Ok((SceneRecord { split, id, seed: scene.seed, segments: pairs.len(), cube }, pairs))
        })
        .collect::<Outcome<Vec<_>>>()?;
    let mut manifest = Manifest {
        version: 1,
        master_seed: cfg.seed,
        config_hash: config_hash(&cfg),
        train_segments: TRAIN_FILE.into(),
        test_segments: TEST_FILE.into(),
        scenes: Vec::new(),
    };
    let (mut train_segs, mut test_segs) = (Vec::new(), Vec::new());
    for (rec, pairs) in results {
        match rec.split {
            Split::Train => train_segs.extend(pairs),
            Split::Test => test_segs.extend(pairs),
        }
        manifest.scenes.push(rec);
    }
    manifest.check_disjoint().map_err(|e| anyhow!(e)).config()?;
    io::write_segments(&dir.join(TRAIN_FILE), &train_segs).data()?;
    io::write_segments(&dir.join(TEST_FILE), &test_segs).data()?;
    manifest.save(&dir).data()?;
    let bytes = std::fs::read(dir.join(MANIFEST_FILE)).data()?;
    println!(
        "simulated {} train + {} test scenes ({} + {} segments) into {}",
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        train_segs.len(),
        test_segs.len(),
        dir.display()
    );
    println!("manifest sha256 {}", sha256(&bytes));
    Ok(())
}

/// Loads one split of a dataset directory, checking scene disjointness
/// against the manifest when one is present.
fn load_split(dir: &Path, split: Split) -> Outcome<Vec<PairedSegment>> {
    let file = match split {
        Split::Train => TRAIN_FILE,
        Split::Test => TEST_FILE,
    };
    if dir.join(MANIFEST_FILE).exists() {
        let manifest = Manifest::load(dir).data()?;
        manifest.check_disjoint().map_err(|e| anyhow!(e)).data()?;
    }
    let segs = io::read_segments(&dir.join(file)).data()?;
    if segs.is_empty() {
        return Err(anyhow!("{} has no segments", dir.join(file).display())).data();
    }
    Ok(segs)
}

fn classify_train(e: TrainError) -> crate::Failure {
    let kind = match &e {
        TrainError::InvalidConfig(_) => Kind::Config,
        TrainError::Data(_) => Kind::Data,
        TrainError::Diverged { .. } | TrainError::Model(RdtError::NonFinite(_)) => Kind::Numeric,
        TrainError::Model(RdtError::LengthMismatch { .. }) => Kind::Data,
        TrainError::Model(_) | TrainError::Diffusion(_) => Kind::Config,
    };
    crate::Failure { kind, err: e.into() }
}

fn classify_ckpt(e: RdtError) -> crate::Failure {
    let kind = match e {
        RdtError::NonFinite(_) => Kind::Numeric,
        _ => Kind::Data,
    };
    crate::Failure { kind, err: anyhow::Error::from(e).context("cannot load checkpoint") }
}

fn history_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}_history.csv"))
}

fn read_history(path: &Path, upto: usize) -> Vec<EpochRecord> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().ok()).collect::<Option<_>>()?;
            (f.len() == 4).then(|| EpochRecord { epoch: f[0] as usize, train_loss: f[1], val_loss: f[2], lr: f[3] })
        })
        .filter(|r| r.epoch <= upto)
        .collect()
}

pub fn train(
    common: &Common,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    ablation: Option<Ablation>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = ablation {
        cfg.model = cfg.model.with_ablation(a);
    }
    cfg.validate().config()?;
    let dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let segments = load_split(&dir, Split::Train)?;
    let (train_set, val_set) = train::split_by_scene(&segments, cfg.train.val_fraction);

    let (model, resumed) = match &resume {
        Some(path) => {
            let (header, model) = load_checkpoint(path).map_err(classify_ckpt)?;
            if ablation.is_some_and(|a| Some(a) != header.config.variant()) {
                return Err(anyhow!("--ablation {} does not match the checkpoint variant {}", ablation.unwrap(), header.variant))
                    .config();
            }
            cfg.model = header.config.clone();
            cfg.diffusion = header.diffusion;
            (model, Some(header))
        }
        None => (RdtModel::<f32>::new(cfg.model.clone(), cfg.train_seed()).config()?, None),
    };
    println!(
        "training {} ({} parameters) on {} segments, validating on {}",
        model.config().variant().map_or("custom", Ablation::name),
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let mut trainer = Trainer::new(model, &cfg.diffusion, cfg.train, cfg.seed, train_set, &val_set).map_err(classify_train)?;
    let hist_path = history_path(&out);
    let mut history = Vec::new();
    if let Some(h) = &resumed {
        trainer.resume_from(h.epoch, h.lr.unwrap_or(cfg.train.initial_lr), h.best_val_loss);
        history = read_history(&history_path(resume.as_deref().unwrap()), h.epoch);
    }
    parent_dir(&out)?;
    let diffusion = cfg.diffusion;
    let save = |t: &Trainer, history: &[EpochRecord]| -> Outcome {
        let mut header = CheckpointHeader::new(t.best_model(), diffusion, t.epoch, t.steps(), t.best_val_loss());
        header.lr = Some(t.scheduler.lr);
        save_checkpoint(&out, t.best_model(), &header).data()?;
        std::fs::write(&hist_path, train::history_csv(history)).data()
    };
    let every = cfg.train.checkpoint_every;
    while trainer.epoch < cfg.train.epochs {
        let rec = trainer.epoch().map_err(classify_train)?;
        println!("epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}", rec.epoch, rec.train_loss, rec.val_loss, rec.lr);
        history.push(rec);
        if every > 0 && rec.epoch % every == 0 {
            save(&trainer, &history)?;
        }
    }
    save(&trainer, &history)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn respaced(diffusion: &DiffusionConfig, steps: Option<usize>) -> Outcome<RespacedSchedule> {
    let mut d = *diffusion;
    if let Some(s) = steps {
        d.sample_steps = s;
    }
    d.respaced().config()
}

fn check_lengths(segments: &[PairedSegment], l: usize, source: &Path) -> Outcome {
    if let Some((i, s)) = segments.iter().enumerate().find(|(_, s)| s.len() != l) {
        return Err(anyhow!(
            "{}: row {} has {} samples but the model expects {l}",
            source.display(),
            i + 2,
            s.len()
        ))
        .data();
    }
    Ok(())
}

fn check_finite(recon: &[Vec<f64>]) -> Outcome {
    if let Some(i) = recon.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(anyhow!("reconstruction of segment {i} is not finite")).numeric();
    }
    Ok(())
}

fn load_model(ckpt: &Path, respaced: &RespacedSchedule) -> Outcome<(CheckpointHeader, RdtModel<f32>, String)> {
    let (header, mut model) = load_checkpoint(ckpt).map_err(classify_ckpt)?;
    model.precompute_timesteps(respaced.steps());
    let hash = sha256(&std::fs::read(ckpt).data()?);
    Ok((header, model, hash))
}

pub fn reconstruct(common: &Common, ckpt: &Path, input: &Path, out: &Path, steps: Option<usize>, plot: bool) -> Outcome {
    let cfg = load_config(common)?;
    let header = resdiff::rdt::read_checkpoint_header(ckpt).map_err(classify_ckpt)?;
    let rs = respaced(&header.diffusion, steps.or(Some(cfg.diffusion.sample_steps)))?;
    let (_, model, hash) = load_model(ckpt, &rs)?;
    let segments = io::read_segments(input).data()?;
    check_lengths(&segments, model.config().seq_len, input)?;
    let seed = cfg.eval_seed();
    let recon = eval::reconstruct(&model, &segments, &rs, seed, cfg.eval.batch_size).numeric()?;
    check_finite(&recon)?;
    parent_dir(out)?;
    let meta = [
        ("steps", rs.len().to_string()),
        ("seed", seed.to_string()),
        ("variant", header.variant.clone()),
        ("checkpoint_sha256", hash),
    ];
    io::write_reconstructions(out, &meta, &segments, &recon).data()?;
    if plot {
        let stem = out.file_stem().map_or("recon".into(), |s| s.to_string_lossy().into_owned());
        let dir = out.with_file_name(format!("{stem}_plots"));
        create_dir(&dir)?;
        for (i, (s, r)) in segments.iter().zip(&recon).enumerate() {
            let title = format!("scene {} offset {}", s.scene, s.offset);
            let doc = svg::overlay(&title, &s.y, r, s.x.as_deref());
            std::fs::write(dir.join(format!("segment_{i:04}.svg")), doc).data()?;
        }
    }
    println!("reconstructed {} segments with {} steps into {}", recon.len(), rs.len(), out.display());
    Ok(())
}

pub enum EvalMode {
    Model(PathBuf),
    Bpf,
    Oracle,
}

#[derive(Serialize)]
struct Report {
    mode: String,
    variant: Option<String>,
    metrics: MetricsReport,
    steps: Option<usize>,
    seed: u64,
    test_data: String,
    config_hash: String,
    checkpoint_sha256: Option<String>,
    artifact_version: String,
}

pub fn evaluate(common: &Common, mode: EvalMode, data: Option<PathBuf>, out: &Path, steps: Option<usize>) -> Outcome {
    let cfg = load_config(common)?;
    let dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let test = load_split(&dir, Split::Test)?;
    let train_path = dir.join(TRAIN_FILE);
    if train_path.exists() {
        let train_scenes: std::collections::BTreeSet<usize> =
            io::read_segments(&train_path).data()?.iter().map(|s| s.scene).collect();
        if let Some(s) = test.iter().find(|s| train_scenes.contains(&s.scene)) {
            return Err(anyhow!("test scene {} also appears in the training set", s.scene)).data();
        }
    }
    if test.iter().any(|s| s.x.is_none()) {
        return Err(anyhow!("test segments need ground truth")).data();
    }
    let fs = cfg.radar.frame_rate_hz();
    let seed = cfg.eval_seed();
    let batch = cfg.eval.batch_size;
    let (name, variant, metrics, used_steps, ckpt_hash) = match mode {
        EvalMode::Bpf => {
            let (m, _) = eval::evaluate_bpf(&test, fs, (cfg.eval.bpf_low_hz, cfg.eval.bpf_high_hz)).numeric()?;
            ("bpf", None, m, None, None)
        }
        EvalMode::Oracle => {
            let rs = respaced(&cfg.diffusion, steps)?;
            let oracle = OracleDenoiser::new(test.iter().map(|s| (s.y.as_slice(), s.x.as_deref().unwrap())));
            let (m, recon) = eval::evaluate(&oracle, &test, &rs, fs, seed, batch).numeric()?;
            check_finite(&recon)?;
            ("oracle", None, m, Some(rs.len()), None)
        }
        EvalMode::Model(ckpt) => {
            let header = resdiff::rdt::read_checkpoint_header(&ckpt).map_err(classify_ckpt)?;
            let rs = respaced(&header.diffusion, steps.or(Some(cfg.diffusion.sample_steps)))?;
            let (header, model, hash) = load_model(&ckpt, &rs)?;
            check_lengths(&test, model.config().seq_len, &dir.join(TEST_FILE))?;
            let (m, recon) = eval::evaluate(&model, &test, &rs, fs, seed, batch).numeric()?;
            check_finite(&recon)?;
            ("model", Some(header.variant), m, Some(rs.len()), Some(hash))
        }
    };
    let hash = config_hash(&cfg);
    let tag = ckpt_hash.as_deref().unwrap_or(&hash);
    let report = Report {
        mode: name.into(),
        variant,
        metrics,
        steps: used_steps,
        seed,
        test_data: dir.join(TEST_FILE).display().to_string(),
        config_hash: hash.clone(),
        checkpoint_sha256: ckpt_hash.clone(),
        artifact_version: format!("v{}-g{}", env!("CARGO_PKG_VERSION"), &tag[..7]),
    };
    parent_dir(out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out, text + "\n").data()?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", metrics.csv_row());
    if !(metrics.cs.is_finite() && metrics.mse.is_finite()) {
        return Err(anyhow!("metrics are not finite")).numeric();
    }
    Ok(())
}
