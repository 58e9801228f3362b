use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use pose_distill::data::{sample_pair_batch, write_dataset, Dataset, PairBatch, Split};
use pose_distill::eval::{evaluate, extract_embeddings};
use pose_distill::pose::{read_landmarks, render_pose_map, PoseLandmarks};
use pose_distill::train::{Checkpoint, JsonlLog, Stage, StepRecord, TrainSink, Trainer};
use pose_distill::{Error, Networks32, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Source};
use crate::grid;
use crate::{Global, StageArg, RUN_ROOT_ENV};

const GRID_PAIRS: usize = 6;

fn run_dir(g: &Global, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &g.out {
        return out.clone();
    }
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{}-seed{}", cfg.ablation.preset, cfg.train.seed))
}

fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join("checkpoints").join(format!("stage{}.ckpt", stage.number()))
}

fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    for sub in ["checkpoints", "logs", "grids", "reports"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(g: &Global, ids: Option<usize>, per_id: Option<usize>, force: bool) -> Result<()> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides())?;
    if let Some(n) = ids {
        cfg.dataset.synth.n_identities = n;
    }
    if let Some(n) = per_id {
        cfg.dataset.synth.images_per_identity = n;
    }
    cfg.dataset.source = Source::Synth;
    cfg.validate()?;
    let out = g.out.clone().ok_or_else(|| Error::Config("synth needs --out <dataset directory>".into()))?;
    if out.is_dir() && fs::read_dir(&out)?.next().is_some() && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to write into it", out.display())));
    }
    let ds = cfg.dataset()?;
    write_dataset(&ds, &out)?;
    info!("wrote {} images to {}", ds.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

struct CliSink {
    log: JsonlLog<BufWriter<fs::File>>,
    checkpoint: PathBuf,
    grids: PathBuf,
    probe: Option<PairBatch<f32>>,
    started: Instant,
}

impl TrainSink<f32> for CliSink {
    fn on_step(&mut self, t: &Trainer<f32>, record: &StepRecord) -> Result<()> {
        TrainSink::<f32>::on_step(&mut self.log, t, record)?;
        if record.iteration % 10 == 0 || record.iteration == 1 {
            let acc = record.pair_accuracy.map_or(String::new(), |a| format!(" pair-acc {a:.3}"));
            info!(
                "stage {} epoch {} iter {}/{} total {:.4}{acc} ({:.0}s)",
                record.stage,
                record.epoch,
                record.iteration,
                t.total_iterations(),
                record.losses.total,
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, t: &mut Trainer<f32>, ds: &Dataset) -> Result<()> {
        TrainSink::<f32>::on_epoch_end(&mut self.log, t, ds)?;
        t.to_checkpoint().save(&self.checkpoint)?;
        if let Some(probe) = &self.probe {
            let name = format!("stage{}_epoch{:03}.png", t.stage().number(), t.epoch());
            training_grid(&mut t.nets, probe, ds)?.save(self.grids.join(name)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        Ok(())
    }
}

/// Rows of input | target skeleton | generated | ground truth.
fn training_grid(nets: &mut Networks32, b: &PairBatch<f32>, ds: &Dataset) -> Result<image::RgbImage> {
    let e = nets.encode(&b.x1)?;
    let p = nets.encode_pose(&b.target_pose)?;
    let y = nets.generate(&e, &p, &b.noise)?;
    let targets = b.indices.target.as_ref().expect("GAN batches carry targets");
    let (h, w) = (ds.height, ds.width);
    let rows: Vec<Vec<image::RgbImage>> = (0..b.len())
        .map(|i| {
            let skel = ds.samples[targets[i]].landmarks.as_ref().map_or_else(|| grid::empty_panel(h, w), |lm| grid::skeleton_panel(lm, h, w));
            vec![grid::batch_image(&b.x1, i), skel, grid::batch_image(&y, i), grid::batch_image(&b.truth, i)]
        })
        .collect();
    Ok(grid::compose(&rows))
}

pub fn train(g: &Global, stage: StageArg, max_iters: Option<u64>, resume: bool) -> Result<()> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides())?;
    if max_iters.is_some() {
        cfg.train.max_iterations = max_iters;
    }
    let last = cfg.ablation.preset.final_stage();
    let stages: Vec<Stage> = match stage {
        StageArg::All => Stage::ALL.into_iter().filter(|s| s.number() <= last.number()).collect(),
        StageArg::One => vec![Stage::I],
        StageArg::Two => vec![Stage::II],
        StageArg::Three => vec![Stage::III],
    };
    if stages.iter().any(|s| s.number() > last.number()) {
        return Err(Error::Config(format!("ablation {} trains stage I only", cfg.ablation.preset)));
    }
    let dir = run_dir(g, &cfg);
    if let Some(prev) = stages[0].previous() {
        let need = checkpoint_path(&dir, prev);
        if !need.is_file() {
            return Err(Error::MissingDependency(format!("stage {} needs the stage-{prev} checkpoint {}", stages[0], need.display())));
        }
    }
    let ds = cfg.dataset()?;
    prepare_run_dir(&dir, &cfg)?;
    info!("run directory {}", dir.display());
    let started = Instant::now();
    for stage in stages {
        let path = checkpoint_path(&dir, stage);
        let mut trainer = match (resume && path.is_file(), stage.previous()) {
            (true, _) => {
                let ck = Checkpoint::<f32>::load(&path)?;
                if ck.header.stage != stage {
                    return Err(Error::Checkpoint(format!("{} holds stage {}, not {stage}", path.display(), ck.header.stage)));
                }
                Trainer::resume(&ck, &ds)?
            }
            (false, None) => Trainer::start(&cfg.model, &cfg.train, &cfg.loss, &ds)?,
            (false, Some(prev)) => {
                let ck = Checkpoint::<f32>::load(&checkpoint_path(&dir, prev))?;
                Trainer::next_stage(&ck, stage, &cfg.train, &cfg.loss, &ds)?
            }
        };
        if trainer.completed() {
            info!("stage {stage} already complete");
            continue;
        }
        let probe = if stage == Stage::I {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x9e37_79b9);
            Some(sample_pair_batch(&ds, GRID_PAIRS, GRID_PAIRS / 2, cfg.train.bandwidth, cfg.model.noise_dim, &mut rng)?)
        };
        let log = fs::OpenOptions::new().create(true).append(true).open(dir.join("logs").join("train.jsonl"))?;
        let mut sink = CliSink { log: JsonlLog { out: BufWriter::new(log) }, checkpoint: path.clone(), grids: dir.join("grids"), probe, started };
        trainer.run(&ds, &mut sink)?;
        trainer.to_checkpoint().save(&path)?;
        if stage == Stage::I && !cfg.model.single_branch_classifier {
            let acc = trainer.pair_accuracy(&ds, 400, 200, cfg.train.seed)?;
            info!("stage I done: eval-mode training-pair accuracy {acc:.3}");
        } else {
            info!("stage {stage} done");
        }
    }
    info!("training finished in {:.0}s", started.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    [Stage::III, Stage::II, Stage::I]
        .into_iter()
        .map(|s| checkpoint_path(dir, s))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingDependency(format!("no checkpoint under {}; run `train` first", dir.join("checkpoints").display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    if !path.is_file() {
        return Err(Error::MissingDependency(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

pub fn eval(g: &Global, checkpoint: Option<PathBuf>, no_landmarks: bool) -> Result<()> {
    let cfg = RunConfig::load(g.config.as_deref(), &g.overrides())?;
    let dir = run_dir(g, &cfg);
    let path = match checkpoint {
        Some(p) => p,
        None => latest_checkpoint(&dir)?,
    };
    let ck = load_checkpoint(&path)?;
    let mut stored = ck.header.model.clone();
    stored.num_classes = cfg.model.num_classes;
    if stored != cfg.model {
        return Err(Error::Config(format!("{} was trained with a different model configuration than the active one", path.display())));
    }
    let mut ds = cfg.dataset()?;
    if no_landmarks {
        ds = ds.without_landmarks();
    }
    let (queries, gallery) = (ds.split(Split::Query), ds.split(Split::Gallery));
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::MissingDependency("the dataset has no query or gallery images".into()));
    }
    let mut nets = ck.networks()?;
    let q = extract_embeddings(&mut nets, &queries, cfg.normalize())?;
    let gal = extract_embeddings(&mut nets, &gallery, cfg.normalize())?;
    let report = evaluate(&q, &gal, &cfg.protocol())?;

    let reports = dir.join("reports");
    fs::create_dir_all(&reports)?;
    let tag = format!("stage{}", ck.header.stage.number());
    fs::write(reports.join(format!("eval_{tag}.json")), serde_json::to_string_pretty(&report)?)?;
    fs::write(reports.join(format!("eval_{tag}.txt")), report.table())?;
    q.write(BufWriter::new(fs::File::create(reports.join(format!("embeddings_{tag}_query.txt")))?))?;
    gal.write(BufWriter::new(fs::File::create(reports.join(format!("embeddings_{tag}_gallery.txt")))?))?;
    println!("checkpoint {} (stage {})", path.display(), ck.header.stage);
    print!("{}", report.table());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn load_image(path: &Path, h: usize, w: usize) -> Result<(Tensor<f32>, (usize, usize))> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let frame = (img.height() as usize, img.width() as usize);
    let img = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok((Tensor::from_vec(&[1, 3, h, w], data)?, frame))
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    g: &Global,
    checkpoint: Option<PathBuf>,
    image: &Path,
    landmarks: &Path,
    pose_id: Option<&str>,
    target_image: Option<&Path>,
    n_noise: usize,
    output: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(g.config.as_deref(), &g.overrides())?;
    if n_noise == 0 {
        return Err(Error::Config("--n-noise must be >= 1".into()));
    }
    let dir = run_dir(g, &cfg);
    let path = match checkpoint {
        Some(p) => p,
        None => latest_checkpoint(&dir)?,
    };
    let ck = load_checkpoint(&path)?;
    if ck.header.stage == Stage::I {
        return Err(Error::MissingDependency(format!("{} is a stage-I checkpoint; generation needs stage II or later", path.display())));
    }
    let (h, w) = (ck.header.model.image_height, ck.header.model.image_width);
    let records = read_landmarks(BufReader::new(fs::File::open(landmarks)?)).map_err(|e| {
        Error::Parse { what: landmarks.display().to_string(), msg: format!("{e}; expected lines `image_id, x0, y0, v0, ..., x17, y17, v17`") }
    })?;
    let record = match pose_id {
        Some(id) => records.iter().find(|r| r.image_id == id),
        None => records.first(),
    }
    .ok_or_else(|| Error::Parse { what: landmarks.display().to_string(), msg: "no matching landmark record".into() })?;
    let (input, _) = load_image(image, h, w)?;
    let (truth, frame) = match target_image {
        Some(p) => {
            let (t, f) = load_image(p, h, w)?;
            (Some(t), f)
        }
        None => (None, (h, w)),
    };
    let lm = PoseLandmarks::new(record.points, frame.0, frame.1)?.rescaled(h, w)?;
    let bw = cfg.train.bandwidth;
    let map = render_pose_map::<f32>(&lm, 0.5 * (bw.lo + bw.hi), h, w)?;
    let mut nets = ck.networks()?;
    let e = nets.encode(&input)?;
    let p = nets.encode_pose(&map.channels.reshape(&[1, pose_distill::pose::NUM_JOINTS, h, w])?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut panels = vec![
        grid::batch_image(&input, 0),
        grid::skeleton_panel(&lm, h, w),
        truth.as_ref().map_or_else(|| grid::empty_panel(h, w), |t| grid::batch_image(t, 0)),
    ];
    for _ in 0..n_noise {
        let z = Tensor::randn(&[1, ck.header.model.noise_dim], 1.0, &mut rng);
        panels.push(grid::batch_image(&nets.generate(&e, &p, &z)?, 0));
    }
    let out = output.unwrap_or_else(|| dir.join("grids").join("generate.png"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    grid::compose(&[panels]).save(&out).map_err(|source| Error::Image { path: out.clone(), source })?;
    println!("{}", out.display());
    std::io::stdout().flush()?;
    Ok(())
}
