use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use incom_core::nn::{Params, Session};
use incom_core::opt::Adam;
use incom_core::rng::{seeded, stream};
use incom_policy::dcfm::Reduction;
use incom_policy::model::Sample;
use incom_policy::{AlignSpec, InComModel, PolicyConfig, Variant};
use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::data::DataSet;
use crate::schedule::Schedule;
use crate::RunError;

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub lambda_scale: f64,
    pub lambda_align: f64,
    pub schedule: Schedule,
    pub ckpt_every: u64,
    pub variant: Variant,
    pub topology: String,
    pub resume: Option<PathBuf>,
    /// opaque config snapshot stored inside checkpoints and compared on resume
    pub config_snapshot: String,
}

impl TrainOpts {
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            seed,
            lambda_scale: 1.0,
            lambda_align: 0.01,
            schedule: Schedule::new(1e-4, 500, 20_000),
            ckpt_every: 2_000,
            variant: Variant::Full,
            topology: "dcfm".into(),
            resume: None,
            config_snapshot: String::new(),
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            steps: 100_000,
            batch: 64,
            schedule: Schedule::new(1e-4, 1_000, 100_000),
            ckpt_every: 10_000,
            ..Self::desk(seed)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub step: u64,
    pub l_flow: f64,
    pub l_scale: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub final_step: u64,
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub const METRICS_HEADER: &str = "step,L_flow,L_scale,L_align,L_total,lr";

/// Eq. 8 composition on already-extracted scalar values, with NaN provenance.
pub fn total_loss(
    l_flow: f64,
    l_scale: f64,
    l_align: f64,
    lambda_scale: f64,
    lambda_align: f64,
    step: u64,
) -> Result<f64, RunError> {
    for (term, v) in [("L_flow", l_flow), ("L_scale", l_scale), ("L_align", l_align)] {
        if !v.is_finite() {
            return Err(RunError::NanLoss { term, step });
        }
    }
    Ok(l_flow + lambda_scale * l_scale + lambda_align * l_align)
}

/// Epoch-wise seeded shuffling with O(1) resume: sample at global position p
/// is `perm_{p/n}[p%n]`, a pure function of (seed, p).
struct Shuffler {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<u32>,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        assert!(n > 0);
        Self { n, seed, epoch: u64::MAX, perm: Vec::new() }
    }

    fn pick(&mut self, pos: u64) -> usize {
        let e = pos / self.n as u64;
        if e != self.epoch {
            let mut rng = seeded(self.seed.wrapping_add(e), stream::DATA);
            self.perm = (0..self.n as u32).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = e;
        }
        self.perm[(pos % self.n as u64) as usize] as usize
    }
}

const STEP_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Fresh RNG per optimization step, pure in (seed, step) so a resumed run
/// draws the same noise sequence as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> rand_chacha::ChaCha8Rng {
    seeded(seed ^ step.wrapping_mul(STEP_MIX), stream::TRAIN)
}

fn rewrite_metrics_upto(path: &Path, step: u64) -> Result<Vec<MetricsRow>, RunError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = vec![METRICS_HEADER.to_string()];
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if let Some(row) = parse_metrics_row(line) {
            if row.step <= step {
                rows.push(row);
                kept.push(line.to_string());
            }
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(rows)
}

pub fn parse_metrics_row(line: &str) -> Option<MetricsRow> {
    let mut it = line.split(',');
    let step = it.next()?.parse().ok()?;
    let mut f = || it.next().and_then(|v| v.parse::<f64>().ok());
    Some(MetricsRow {
        step,
        l_flow: f()?,
        l_scale: f()?,
        l_align: f()?,
        l_total: f()?,
        lr: f()?,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, RunError> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().skip(1).filter_map(parse_metrics_row).collect())
}

pub fn train(
    cfg: &PolicyConfig,
    data: &DataSet,
    opts: &TrainOpts,
    out_dir: &Path,
) -> Result<TrainReport, RunError> {
    if data.is_empty() {
        return Err(RunError::MissingArtifact("dataset has no samples".into()));
    }
    data.check_shapes(cfg)?;
    if opts.batch == 0 {
        return Err(RunError::Config("batch size must be positive".into()));
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let latest = out_dir.join("latest.ck");

    let mut params = Params::<f32>::new();
    let mut start = 0u64;
    let mut rows = Vec::new();
    let resumed = match &opts.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if !opts.config_snapshot.is_empty() && ck.config != opts.config_snapshot {
                return Err(RunError::Config(
                    "checkpoint config snapshot does not match the run config".into(),
                ));
            }
            params = ck.seed_params();
            start = ck.step;
            rows = rewrite_metrics_upto(&metrics_path, start)?;
            Some(ck)
        }
        None => None,
    };

    let model = InComModel::build(&mut params, cfg, opts.variant, &opts.topology, opts.seed)?;
    let mut adam = Adam::new(&params);
    if let Some(ck) = &resumed {
        if ck.opt.is_some() {
            ck.restore_adam(&params, &mut adam)?;
        }
    } else if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }

    let mut writer = BufWriter::new(if metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    });

    checkpoint::save(&latest, &opts.config_snapshot, start, &params, Some(&adam))?;

    let mut shuf = Shuffler::new(data.len(), opts.seed);
    let mut pos = start * opts.batch as u64;
    for step in start + 1..=opts.steps {
        let lr = opts.schedule.lr_at(step);
        let batch: Vec<Sample> = (0..opts.batch)
            .map(|_| {
                let (e, t) = data.index[shuf.pick(pos)];
                pos += 1;
                data.sample_at(cfg, e as usize, t as usize)
            })
            .collect();

        let mut rng = step_rng(opts.seed, step);
        let align =
            if opts.lambda_align != 0.0 { AlignSpec::Live } else { AlignSpec::Off };
        let (l_flow, l_scale, l_align, grads) = {
            let mut s = Session::new(&params);
            let out = model.forward_train(&mut s, &batch, &mut rng, Reduction::BatchMean, align)?;
            let mut total = out.l_flow;
            // zero-weight terms are skipped outright so their loss paths
            // contribute no gradient at all
            if opts.lambda_scale != 0.0 {
                total = s.tape.add_scaled(total, out.l_scale, opts.lambda_scale as f32);
            }
            if opts.lambda_align != 0.0 {
                total = s.tape.add_scaled(total, out.l_align, opts.lambda_align as f32);
            }
            let lf = s.tape.value(out.l_flow).item() as f64;
            let ls = s.tape.value(out.l_scale).item() as f64;
            let la = s.tape.value(out.l_align).item() as f64;
            let g = s.tape.backward(total);
            (lf, ls, la, s.param_grads(&g))
        };

        let l_total = match total_loss(l_flow, l_scale, l_align, opts.lambda_scale, opts.lambda_align, step) {
            Ok(v) => v,
            Err(e) => {
                writer.flush()?;
                return Err(e);
            }
        };
        adam.step(&mut params, &grads, lr);

        let row = MetricsRow { step, l_flow, l_scale, l_align, l_total, lr };
        writeln!(writer, "{},{},{},{},{},{}", step, l_flow, l_scale, l_align, l_total, lr)?;
        if step % 200 == 0 {
            writer.flush()?;
        }
        rows.push(row);

        if step % opts.ckpt_every == 0 || step == opts.steps {
            let versioned = out_dir.join(format!("ckpt-{step:06}.ck"));
            checkpoint::save(&versioned, &opts.config_snapshot, step, &params, Some(&adam))?;
            checkpoint::save(&latest, &opts.config_snapshot, step, &params, Some(&adam))?;
        }
    }
    writer.flush()?;
    if start >= opts.steps {
        // nothing left to do; latest.ck already reflects the resumed state
        checkpoint::save(&latest, &opts.config_snapshot, start, &params, Some(&adam))?;
    }

    Ok(TrainReport {
        final_step: opts.steps.max(start),
        rows,
        metrics_path,
        checkpoint_path: latest,
    })
}
