//! Rotation-equivariant layers over `C_N` and the feature-pyramid backbone.
//!
//! Under a counter-clockwise quarter turn of the input, every feature map
//! produced here transforms as `F ↦ rot_q1(cyclic_shift(F, N/4))`.

mod checkpoint;
mod layers;
mod rotate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use layers::{gconv_forward, lift_forward, GroupConv, LiftingConv};
pub use rotate::{rotate_angle, rotation_taps};

use crate::autodiff::{ParamSet, Parameter, Tape, Var};
use crate::config::{join, KvConfig};
use crate::error::{Error, Result};
use crate::gtensor::{GroupTensor, Real, ScalarImage};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Group order `N`.
    pub order: usize,
    /// Output channels per stage (stage 1 is the lifting conv).
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// 1-based stages concatenated into `F`.
    pub pyramid: Vec<usize>,
    /// Group-shared standardization before each ReLU.
    pub group_norm: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl BackboneConfig {
    /// Small model that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            order: 4,
            widths: vec![8, 16, 16, 32],
            strides: vec![2, 1, 1, 1],
            kernel: 3,
            pyramid: vec![2, 4],
            group_norm: false,
            seed: 0,
        }
    }

    /// `|G| = 16`, `C = 64`, descriptor length 1024.
    pub fn full() -> Self {
        Self {
            order: 16,
            widths: vec![16, 32, 32, 32],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.order < 2 {
            return bad(format!("group order must be >= 2, got {}", self.order));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return bad(format!(
                "{} widths vs {} strides",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.contains(&0) {
            return bad("zero channel width".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if let Some(s) = self.strides.iter().find(|s| **s == 0 || !s.is_power_of_two()) {
            return bad(format!("strides must be powers of two, got {s}"));
        }
        if self.pyramid.is_empty() || self.pyramid.iter().any(|l| *l == 0 || *l > self.widths.len()) {
            return bad(format!(
                "pyramid stages {:?} outside 1..={}",
                self.pyramid,
                self.widths.len()
            ));
        }
        Ok(())
    }

    /// `C`: sum of the pyramid stage widths.
    pub fn channels(&self) -> usize {
        self.pyramid.iter().map(|l| self.widths[l - 1]).sum()
    }

    /// Length of an aligned descriptor, `C·N`.
    pub fn descriptor_dim(&self) -> usize {
        self.channels() * self.order
    }

    /// Cumulative stride after each stage.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    /// Check an input extent; returns the output extent `(H'/2, W'/2)`.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let max_stride = self.cumulative_strides().into_iter().max().unwrap_or(1).max(2);
        if !height.is_multiple_of(max_stride) || !width.is_multiple_of(max_stride) || height < self.kernel || width < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "input {height}x{width} must be divisible by {max_stride} and at least {0}x{0}",
                self.kernel
            )));
        }
        Ok((height / 2, width / 2))
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::full();
        let cfg = Self {
            order: kv.take_or("group_order", d.order)?,
            widths: kv.take_list("widths")?.unwrap_or(d.widths),
            strides: kv.take_list("strides")?.unwrap_or(d.strides),
            kernel: kv.take_or("kernel", d.kernel)?,
            pyramid: kv.take_list("pyramid")?.unwrap_or(d.pyramid),
            group_norm: kv.take_or("group_norm", d.group_norm)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "group_order={}\nwidths={}\nstrides={}\nkernel={}\npyramid={}\ngroup_norm={}\nseed={}\n",
            self.order,
            join(&self.widths),
            join(&self.strides),
            self.kernel,
            join(&self.pyramid),
            self.group_norm,
            self.seed
        )
    }
}

const NORM_EPS: f64 = 1e-5;

/// Lifting conv followed by group convs with ReLU between stages; the
/// pyramid concatenates selected pre-activation stage outputs.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    lift: LiftingConv,
    convs: Vec<GroupConv>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (n, k) = (cfg.order, cfg.kernel);
        let lift = LiftingConv::new("stage1", cfg.widths[0], n, k, cfg.strides[0], &mut rng)?;
        let mut convs = Vec::new();
        for i in 1..cfg.widths.len() {
            convs.push(GroupConv::new(
                &format!("stage{}", i + 1),
                cfg.widths[i - 1],
                cfg.widths[i],
                n,
                k,
                cfg.strides[i],
                &mut rng,
            )?);
        }
        Ok(Self { cfg, lift, convs })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        [&self.lift.weight, &self.lift.bias]
            .into_iter()
            .chain(self.convs.iter().flat_map(|c| [&c.weight, &c.bias]))
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        [&mut self.lift.weight, &mut self.lift.bias]
            .into_iter()
            .chain(self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]))
    }

    /// Snapshot of the learnable tensors in a fixed order.
    pub fn param_set(&self) -> ParamSet {
        ParamSet::new(self.parameters().cloned().collect())
    }

    /// Copy values from `params`; every backbone parameter must be present.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        for p in self.parameters_mut() {
            let src = params
                .get(&p.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {}", p.name)))?;
            if src.value.len() != p.value.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} has {} values, expected {}",
                    p.name,
                    src.value.len(),
                    p.value.len()
                )));
            }
            p.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.parameters().map(|p| p.value.len()).sum()
    }

    /// Record the network on `tape`. `vars` are this model's parameters in
    /// [`Backbone::param_set`] order; `x` is a `(1, H', W')` image. Returns
    /// `F` as `(C·N, H'/2, W'/2)`.
    pub fn forward_graph<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let expected = 2 * (1 + self.convs.len());
        if vars.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "backbone takes {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = match shape[..] {
            [1, h, w] => (h, w),
            _ => return Err(Error::ShapeMismatch(format!("expected a (1, H, W) image, got {shape:?}"))),
        };
        let (oh, ow) = self.cfg.output_dims(h, w)?;
        let n = self.cfg.order;
        let mut stages = Vec::with_capacity(expected / 2);
        let norm = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
            if self.cfg.group_norm {
                tape.channel_norm(y, n, NORM_EPS)
            } else {
                Ok(y)
            }
        };
        // the pyramid taps pre-activation maps; the next stage sees the ReLU
        let y = self.lift.forward_graph(tape, vars[0], vars[1], x)?;
        let mut cur = norm(tape, y)?;
        stages.push(cur);
        for (i, conv) in self.convs.iter().enumerate() {
            let a = tape.relu(cur);
            let y = conv.forward_graph(tape, vars[2 * i + 2], vars[2 * i + 3], a)?;
            cur = norm(tape, y)?;
            stages.push(cur);
        }
        let mut parts = Vec::with_capacity(self.cfg.pyramid.len());
        for &l in &self.cfg.pyramid {
            let f = stages[l - 1];
            let s = tape.value(f).shape().to_vec();
            parts.push(if (s[1], s[2]) == (oh, ow) {
                f
            } else {
                tape.resize(f, oh, ow)?
            });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    }

    /// Inference forward pass in `f32`.
    pub fn forward(&self, img: &ScalarImage) -> Result<GroupTensor> {
        let mut tape = Tape::<f32>::new();
        let vars = self.param_set().register(&mut tape);
        let x = tape.input(layers::image_to_tensor(img));
        let f = self.forward_graph(&mut tape, &vars, x)?;
        GroupTensor::from_tensor(tape.value(f), self.cfg.order)
    }

    pub fn lifting(&self) -> &LiftingConv {
        &self.lift
    }

    pub fn group_convs(&self) -> &[GroupConv] {
        &self.convs
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_kv(),
            tensors: self.parameters().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuild a model from a checkpoint. Unknown config keys and tensors
    /// that are not backbone parameters are left for the caller.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut kv = KvConfig::parse(&ck.config)?;
        let cfg = BackboneConfig::from_kv(&mut kv)?;
        let mut model = Self::new(cfg)?;
        let params = ParamSet::new(
            ck.tensors
                .iter()
                .map(|(n, t)| Parameter::new(n.clone(), t.clone()))
                .collect(),
        );
        model.load_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, &self.to_checkpoint())?;
        use std::io::Write;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(&read_checkpoint(&mut f)?)
    }
}

/// Max abs deviation from `F(rot_q x) = rot_q(cyclic_shift(F(x), q·N/4))`.
pub fn quarter_turn_error(model: &Backbone, img: &ScalarImage, q: i64) -> Result<f64> {
    let n = model.config().order;
    if !n.is_multiple_of(4) {
        return Err(Error::Config(format!("quarter turns need |G| divisible by 4, got {n}")));
    }
    let lhs = model.forward(&img.rotate_quarter(q)?)?;
    let rhs = model
        .forward(img)?
        .cyclic_shift(q.rem_euclid(4) * (n / 4) as i64)
        .rotate_spatial_quarter(q)?;
    Ok(lhs.max_abs_diff(&rhs))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EquivarianceReport {
    pub order: usize,
    pub inputs: usize,
    /// Worst error for one, two and three quarter turns.
    pub per_turn: [f64; 3],
    pub max_error: f64,
}

/// Quarter-turn law on `inputs` uniform-noise images of side `size`.
pub fn equivariance_suite(model: &Backbone, inputs: usize, size: usize, seed: u64) -> Result<EquivarianceReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_turn = [0.0f64; 3];
    for _ in 0..inputs {
        let img = ScalarImage::from_fn(size, size, |_, _| rng.random::<f32>());
        for (q, worst) in per_turn.iter_mut().enumerate() {
            *worst = worst.max(quarter_turn_error(model, &img, q as i64 + 1)?);
        }
    }
    Ok(EquivarianceReport {
        order: model.config().order,
        inputs,
        per_turn,
        max_error: per_turn.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(n: usize, seed: u64) -> ScalarImage {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ScalarImage::from_fn(n, n, |_, _| r.random::<f32>())
    }

    fn equivariance_error(cfg: BackboneConfig, n: usize) -> f64 {
        let model = Backbone::new(cfg).unwrap();
        equivariance_suite(&model, 1, n, 11).unwrap().max_error
    }

    #[test]
    fn desk_backbone_shapes() {
        let cfg = BackboneConfig::desk();
        assert_eq!(cfg.channels(), 48);
        let f = Backbone::new(cfg).unwrap().forward(&noise(16, 1)).unwrap();
        let d = f.dims();
        assert_eq!((d.channels, d.order, d.height, d.width), (48, 4, 8, 8));
    }

    #[test]
    fn full_config_descriptor_length() {
        assert_eq!(BackboneConfig::full().descriptor_dim(), 1024);
    }

    #[test]
    fn single_stage_pyramid_is_the_stage() {
        let cfg = BackboneConfig {
            widths: vec![3],
            strides: vec![2],
            pyramid: vec![1],
            ..BackboneConfig::desk()
        };
        let model = Backbone::new(cfg).unwrap();
        let img = noise(8, 2);
        let f = model.forward(&img).unwrap();
        // the tapped map is taken before the activation
        let lifted = lift_forward(model.lifting(), &img).unwrap().into_data();
        assert_eq!(f.data(), &lifted[..]);
    }

    #[test]
    fn desk_backbone_is_c4_equivariant() {
        assert!(equivariance_error(BackboneConfig::desk(), 16) <= 1e-4);
    }

    #[test]
    fn c8_and_group_norm_at_quarter_turns() {
        let cfg = BackboneConfig {
            order: 8,
            widths: vec![2, 3, 3],
            strides: vec![2, 1, 1],
            pyramid: vec![2, 3],
            group_norm: true,
            ..BackboneConfig::desk()
        };
        assert!(equivariance_error(cfg, 16) <= 1e-3);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut c = BackboneConfig::desk();
        c.order = 1;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.pyramid = vec![5];
        assert!(c.validate().is_err());
        let model = Backbone::new(BackboneConfig::desk()).unwrap();
        assert!(matches!(model.forward(&noise(15, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = BackboneConfig {
            group_norm: true,
            seed: 9,
            ..BackboneConfig::desk()
        };
        let mut kv = KvConfig::parse(&cfg.to_kv()).unwrap();
        assert_eq!(BackboneConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }

    #[test]
    fn checkpoint_roundtrip_restores_outputs() {
        let cfg = BackboneConfig {
            seed: 5,
            ..BackboneConfig::desk()
        };
        let model = Backbone::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.req");
        model.save(&path).unwrap();
        let back = Backbone::load(&path).unwrap();
        let img = noise(16, 3);
        assert_eq!(model.forward(&img).unwrap(), back.forward(&img).unwrap());
        assert_eq!(model.param_set(), back.param_set());
    }
}
