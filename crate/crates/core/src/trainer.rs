//! End-to-end self-supervised optimization with AdamW.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, forward, GradCheckOptions, GradCheckReport, ParamSet, Tape, Var};
use crate::config::KvConfig;
use crate::datagen::{decompose_rotation, make_pair, Homography, Mask, PairConfig, TrainingPair};
use crate::eqnn::{read_checkpoint, write_checkpoint, Backbone, BackboneConfig, Checkpoint};
use crate::error::{Error, Result};
use crate::gtensor::{Real, ScalarImage, Tensor};
use crate::invmap::feature_coord;
use crate::losses::{descriptor_loss_graph, orientation_loss_graph, quantize_shift, total_loss_graph, LossConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub pair: PairConfig,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Worker threads for per-pair gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            loss: LossConfig::default(),
            pair: PairConfig::default(),
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.1,
            epochs: 12,
            iters_per_epoch: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// CPU smoke training. Eight orientation bins instead of the desk
    /// backbone's four: with 90° bins the dominant orientation is too coarse
    /// for aligning to beat pooling.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                order: 8,
                widths: vec![4, 8, 8, 16],
                ..BackboneConfig::desk()
            },
            batch: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 1,
            iters_per_epoch: 600,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        let ok = self.batch > 0
            && self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.epochs > 0
            && self.iters_per_epoch > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.threads > 0;
        if !ok {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        self.backbone.output_dims(self.pair.crop, self.pair.crop)?;
        Ok(())
    }

    /// Parse a full config; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?)
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            backbone: BackboneConfig::from_kv(kv)?,
            loss: LossConfig::from_kv(kv)?,
            pair: PairConfig::from_kv(kv)?,
            batch: kv.take_or("batch", d.batch)?,
            lr: kv.take_or("lr", d.lr)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            iters_per_epoch: kv.take_or("iters_per_epoch", d.iters_per_epoch)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            eps: kv.take_or("adam_eps", d.eps)?,
            seed: kv.take_or("train_seed", d.seed)?,
            threads: kv.take_or("threads", d.threads)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "{}{}{}batch={}\nlr={}\nweight_decay={}\nepochs={}\niters_per_epoch={}\nbeta1={}\nbeta2={}\n\
             adam_eps={}\ntrain_seed={}\nthreads={}\n",
            self.backbone.to_kv(),
            self.loss.to_kv(),
            self.pair.to_kv(),
            self.batch,
            self.lr,
            self.weight_decay,
            self.epochs,
            self.iters_per_epoch,
            self.beta1,
            self.beta2,
            self.eps,
            self.seed,
            self.threads
        )
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    // f32 so that a checkpoint round trip is exact
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `θ ← θ(1 − lr·wd) − lr · m̂ / (√v̂ + ε)` using the accumulated `grad`s.
    pub fn update(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - upd) as f32;
            }
        }
    }

    fn to_tensors(&self, params: &ParamSet) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (kind, store) in [("m", &self.m), ("v", &self.v)] {
            for (p, s) in params.iter().zip(store) {
                let data = s.clone();
                out.push((format!("adam.{kind}.{}", p.name), Tensor::new(vec![s.len()], data).expect("len")));
            }
        }
        out
    }

    fn load_tensors(&mut self, params: &ParamSet, ck: &Checkpoint) -> Result<()> {
        for (kind, store) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (p, s) in params.iter().zip(store.iter_mut()) {
                let name = format!("adam.{kind}.{}", p.name);
                let t = ck
                    .get(&name)
                    .ok_or_else(|| Error::Format { what: "checkpoint", msg: format!("missing {name}") })?;
                if t.len() != s.len() {
                    return Err(Error::ShapeMismatch(format!("{name}: {} vs {}", t.len(), s.len())));
                }
                s.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub ori: f64,
    pub desc: f64,
    pub total: f64,
}

/// Per-keypoint rows `(K, C·N)` of `F` at image-frame keypoints.
pub fn sample_rows<T: Real>(tape: &mut Tape<T>, f: Var, kps: &[(f64, f64)]) -> Result<Var> {
    let s = tape.value(f).shape().to_vec();
    let (h, w) = (s[1] as f64 - 1.0, s[2] as f64 - 1.0);
    let pts: Vec<(f64, f64)> = kps
        .iter()
        .map(|&(x, y)| (feature_coord(y).clamp(0.0, h), feature_coord(x).clamp(0.0, w)))
        .collect();
    tape.bilinear_sample(f, &pts)
}

/// Record both losses for one pair. Descriptors of the target are aligned by
/// the ground-truth shift, those of the source by zero.
pub fn pair_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    model: &Backbone,
    vars: &[Var],
    pair: &TrainingPair,
    loss: &LossConfig,
) -> Result<(Var, Var, Var)> {
    let n = model.config().order;
    let img = |i: &ScalarImage| Tensor::new(vec![1, i.height(), i.width()], i.data().iter().map(|v| T::of(*v as f64)).collect());
    let xa = tape.input(img(&pair.source)?);
    let xb = tape.input(img(&pair.target)?);
    let fa = model.forward_graph(tape, vars, xa)?;
    let fb = model.forward_graph(tape, vars, xb)?;
    let pa = sample_rows(tape, fa, &pair.kps_a)?;
    let pb = sample_rows(tape, fb, &pair.kps_b)?;
    let delta = quantize_shift(pair.theta, n);
    let oa = tape.slice_cols(pa, 0, n)?;
    let ob = tape.slice_cols(pb, 0, n)?;
    let ori = orientation_loss_graph(tape, oa, ob, delta)?;
    let da = tape.l2_normalize_rows(pa);
    let aligned_b = tape.shift_rows(pb, n, &vec![delta as i64; pair.kps_b.len()])?;
    let db = tape.l2_normalize_rows(aligned_b);
    let desc = descriptor_loss_graph(tape, da, db, loss.tau, loss.inclusive)?;
    let total = total_loss_graph(tape, ori, desc, loss.alpha)?;
    Ok((ori, desc, total))
}

fn pair_gradients(model: &Backbone, params: &ParamSet, pair: &TrainingPair, loss: &LossConfig) -> Result<(StepLosses, Vec<Tensor<f32>>)> {
    let mut parts = (None, None);
    let (total, tape) = forward::<f32>(|tape| {
        let vars = params.register(tape);
        let (o, d, t) = pair_loss_graph(tape, model, &vars, pair, loss)?;
        parts = (Some(o), Some(d));
        Ok(t)
    })?;
    let ori = tape.value(parts.0.unwrap()).item() as f64;
    let desc = tape.value(parts.1.unwrap()).item() as f64;
    let grads = tape.backward()?;
    let g = params
        .iter()
        .map(|p| grads.get(&p.name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        .collect();
    Ok((
        StepLosses {
            ori,
            desc,
            total: total as f64,
        },
        g,
    ))
}

/// One optimizer step on `pairs`: mean loss, mean gradient, AdamW update.
pub fn train_step(
    model: &mut Backbone,
    params: &mut ParamSet,
    opt: &mut AdamW,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<StepLosses> {
    if pairs.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.kps_a.len() < 2) {
        return Err(Error::TooFewKeypoints { found: p.kps_a.len(), required: 2 });
    }
    let threads = cfg.threads.min(pairs.len()).max(1);
    let results: Vec<Result<(StepLosses, Vec<Tensor<f32>>)>> = if threads == 1 {
        pairs.iter().map(|p| pair_gradients(model, params, p, &cfg.loss)).collect()
    } else {
        let chunk = pairs.len().div_ceil(threads);
        let (m, ps) = (&*model, &*params);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|p| pair_gradients(m, ps, p, &cfg.loss)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    params.zero_grad();
    let scale = 1.0 / pairs.len() as f64;
    let mut mean = StepLosses::default();
    for r in results {
        let (l, grads) = r?;
        mean.ori += l.ori * scale;
        mean.desc += l.desc * scale;
        mean.total += l.total * scale;
        for (p, g) in params.iter_mut().zip(grads) {
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += (*v as f64 * scale) as f32;
            }
        }
    }
    let grads_finite = params.iter().all(|p| p.grad.data().iter().all(|v| v.is_finite()));
    if !mean.total.is_finite() || !grads_finite {
        return Err(Error::NonFiniteLoss {
            iteration,
            ori: mean.ori,
            desc: mean.desc,
        });
    }
    opt.update(params);
    model.load_params(params)?;
    Ok(mean)
}

fn iteration_rng(seed: u64, iteration: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration as u64) << 16 | slot as u64);
    rng
}

/// Draw the batch for a global iteration; fully determined by
/// `(seed, iteration)`.
pub fn sample_batch(corpus: &[ScalarImage], cfg: &TrainConfig, iteration: usize) -> Result<Vec<TrainingPair>> {
    let mut batch = Vec::with_capacity(cfg.batch);
    for slot in 0..cfg.batch {
        let mut rng = iteration_rng(cfg.seed, iteration, slot);
        let mut last = None;
        for _ in 0..32 {
            let img = &corpus[rng.random_range(0..corpus.len())];
            match make_pair(img, &mut rng, &cfg.pair) {
                Ok(p) => {
                    last = None;
                    batch.push(p);
                    break;
                }
                Err(e @ Error::TooFewKeypoints { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = last {
            return Err(e);
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub iterations: Vec<StepLosses>,
    /// Global index of the first recorded iteration (non-zero after resume).
    pub start_iteration: usize,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Mean losses over `range` of the recorded iterations.
    pub fn mean(&self, range: std::ops::Range<usize>) -> StepLosses {
        let s = &self.iterations[range];
        let n = s.len().max(1) as f64;
        StepLosses {
            ori: s.iter().map(|l| l.ori).sum::<f64>() / n,
            desc: s.iter().map(|l| l.desc).sum::<f64>() / n,
            total: s.iter().map(|l| l.total).sum::<f64>() / n,
        }
    }
}

/// Model and optimizer state, storable as a checkpoint.
pub struct TrainState {
    pub model: Backbone,
    pub params: ParamSet,
    pub opt: AdamW,
    /// Next global iteration.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Backbone::new(cfg.backbone.clone())?;
        let params = model.param_set();
        let opt = AdamW::new(cfg, &params);
        Ok(Self { model, params, opt, iteration: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let mut extra = KvConfig::parse(&cfg.to_kv()).expect("own output parses");
        // backbone keys are already in the block
        BackboneConfig::from_kv(&mut extra).expect("own output parses");
        let mut text = ck.config.clone();
        for line in cfg.to_kv().lines() {
            let key = line.split('=').next().unwrap_or("");
            if !ck.config.lines().any(|l| l.split('=').next() == Some(key)) {
                text.push_str(line);
                text.push('\n');
            }
        }
        text.push_str(&format!("iteration={}\nadam_step={}\n", self.iteration, self.opt.step));
        ck.config = text;
        ck.tensors.extend(self.opt.to_tensors(&self.params));
        ck
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            write_checkpoint(&mut f, &self.to_checkpoint(cfg))?;
            std::io::Write::flush(&mut f)?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Restore model, moments and iteration counter from a training checkpoint.
    pub fn resume(cfg: &TrainConfig, path: &Path) -> Result<Self> {
        let ck = read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
        let model = Backbone::from_checkpoint(&ck)?;
        if model.config() != &cfg.backbone {
            return Err(Error::Config("checkpoint backbone differs from the training config".into()));
        }
        let mut kv = KvConfig::parse(&ck.config)?;
        let iteration = kv.take::<usize>("iteration")?.ok_or_else(|| Error::Format {
            what: "checkpoint",
            msg: "not a training checkpoint (no iteration)".into(),
        })?;
        let step = kv.take_or::<u64>("adam_step", 0)?;
        let params = model.param_set();
        let mut opt = AdamW::new(cfg, &params);
        opt.load_tensors(&params, &ck)?;
        opt.step = step;
        Ok(Self { model, params, opt, iteration })
    }
}

/// Run `epochs × iters_per_epoch` steps from `state.iteration`, writing a
/// checkpoint to `out` after every epoch. `progress` sees each step.
pub fn train_loop(
    corpus: &[ScalarImage],
    cfg: &TrainConfig,
    state: &mut TrainState,
    out: Option<&Path>,
    mut progress: impl FnMut(usize, &StepLosses),
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(PathBuf::new()));
    }
    cfg.validate()?;
    let t0 = Instant::now();
    let total = cfg.epochs * cfg.iters_per_epoch;
    let mut report = TrainReport {
        start_iteration: state.iteration,
        ..Default::default()
    };
    while state.iteration < total {
        let it = state.iteration;
        let batch = sample_batch(corpus, cfg, it)?;
        let l = train_step(&mut state.model, &mut state.params, &mut state.opt, &batch, cfg, it)?;
        progress(it, &l);
        report.iterations.push(l);
        state.iteration += 1;
        if state.iteration.is_multiple_of(cfg.iters_per_epoch) || state.iteration == total {
            if let Some(path) = out {
                state.save(cfg, path)?;
                report.checkpoint = Some(path.to_path_buf());
            }
        }
    }
    report.wall_seconds = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Synthetic quarter-turn pair of side `size` with a 3×3 grid of
/// correspondences, small enough for finite differences.
pub fn grad_check_pair(size: usize, seed: u64) -> Result<TrainingPair> {
    let source = crate::datagen::texture::mixed(size, size, seed);
    let c = (size as f64 - 1.0) / 2.0;
    // a counter-clockwise quarter turn is a 270° rotation in the y-down frame
    let h = Homography::rotation_about(270.0, c, c);
    let target = source.rotate_quarter(1)?;
    let grid = [size as f64 * 0.25, size as f64 * 0.5, size as f64 * 0.75];
    let kps_a: Vec<(f64, f64)> = grid.iter().flat_map(|&y| grid.iter().map(move |&x| (x.floor(), y.floor()))).collect();
    let kps_b = kps_a
        .iter()
        .map(|&(x, y)| h.project(x, y).ok_or_else(|| Error::Degenerate("projection at infinity".into())))
        .collect::<Result<_>>()?;
    Ok(TrainingPair {
        mask: Mask::full(size, size),
        theta: decompose_rotation(&h)?,
        source,
        target,
        h,
        kps_a,
        kps_b,
    })
}

/// Central differences against the tape on the full loss (both terms)
/// of one [`grad_check_pair`], in `f64`.
pub fn pipeline_grad_check(
    model: &Backbone,
    loss: &LossConfig,
    size: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let pair = grad_check_pair(size, seed)?;
    check_gradients(&model.param_set(), opts, |tape, vars| {
        let (_, _, total) = pair_loss_graph(tape, model, vars, &pair, loss)?;
        Ok(total)
    })
}

/// Fresh training run on a corpus directory.
pub fn train(corpus_dir: &Path, cfg: &TrainConfig, out: Option<&Path>) -> Result<(Backbone, TrainReport)> {
    let corpus = crate::datagen::load_corpus(corpus_dir)?;
    let mut state = TrainState::new(cfg)?;
    let report = train_loop(&corpus, cfg, &mut state, out, |_, _| {})?;
    Ok((state.model, report))
}
