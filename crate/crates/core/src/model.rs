//! The residual classifier with frequency plugins.
//!
//! Layout for a ladder of `k` stages:
//!
//! ```text
//! [hfri] -> stem conv3x3 3->c1 -> [bn] -> relu
//! stage s (1..=k): residual block c_{s-1} -> c_s (stride 1 for s = 1, else 2)
//!                  -> [fcl -> relu] -> [hfrf spatial] -> [hfrf channel]
//! global average pool -> linear c_k -> 2
//! ```
//!
//! where `c_s = base_channels * ladder[s - 1]` and the plugins in brackets
//! appear at the stages named by the placement table when their flag is on.
//! A residual block is `conv3x3 -> bn -> relu -> conv3x3 -> bn`, added to a
//! shortcut (identity, or `conv1x1 -> bn` when stride or width changes),
//! followed by relu.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mode, RunningStats, Tape, Var};
use crate::config::{join, list, parse_pairs, render_pairs, value};
use crate::error::{Error, Result};
use crate::freq::{fcl, hfrf_channel, hfrf_spatial, hfri, FclMode, FclParams, FilterDims, FilterSpec};
use crate::real::Real;
use crate::tensor::io::{decode_real, encode_real};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const INPUT_CHANNELS: usize = 3;

/// Stages (1-based) at which each plugin is inserted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placements {
    pub fcl: Vec<usize>,
    pub hfrf_spatial: Vec<usize>,
    pub hfrf_channel: Vec<usize>,
}

impl Default for Placements {
    fn default() -> Self {
        Placements { fcl: vec![1, 2], hfrf_spatial: vec![1], hfrf_channel: vec![2] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    /// Width multipliers of the stages relative to `base_channels`.
    pub ladder: Vec<usize>,
    pub placements: Placements,
    pub use_hfri: bool,
    pub use_hfrf_spatial: bool,
    pub use_hfrf_channel: bool,
    pub use_fcl: bool,
    pub use_batchnorm: bool,
    pub fcl_mode: FclMode,
    /// Share one set of 1x1 kernels between both spectrum components.
    pub fcl_tied: bool,
    pub cut: FilterSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            base_channels: 32,
            ladder: vec![1, 2, 5, 10],
            placements: Placements::default(),
            use_hfri: true,
            use_hfrf_spatial: true,
            use_hfrf_channel: true,
            use_fcl: true,
            use_batchnorm: true,
            fcl_mode: FclMode::Cartesian,
            fcl_tied: false,
            cut: FilterSpec::spatial(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default layout at 32 x 32 input.
    pub fn desk() -> Self {
        ModelConfig { input_size: 32, ..Self::default() }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.ladder.iter().map(|&m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.base_channels == 0 {
            return Err(Error::Config("input_size and base_channels must be positive".into()));
        }
        if self.ladder.is_empty() || self.ladder.contains(&0) {
            return Err(Error::Config(format!("ladder {:?} must be non-empty and positive", self.ladder)));
        }
        let k = self.ladder.len();
        let p = &self.placements;
        for (name, stages) in [("fcl", &p.fcl), ("hfrf_spatial", &p.hfrf_spatial), ("hfrf_channel", &p.hfrf_channel)] {
            if let Some(&s) = stages.iter().find(|&&s| s == 0 || s > k) {
                return Err(Error::Config(format!("{name} placement at stage {s}, but there are {k} stages")));
            }
        }
        Ok(())
    }

    /// Spatial extent of the feature maps leaving stage `s` (1-based).
    pub fn stage_extent(&self, s: usize) -> usize {
        let mut e = self.input_size;
        for _ in 1..s {
            e = (e - 1) / 2 + 1;
        }
        e
    }

    /// Key-value pairs without a section prefix.
    pub fn entries(&self) -> Vec<(String, String)> {
        let p = &self.placements;
        [
            ("input_size", self.input_size.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("ladder", join(&self.ladder)),
            ("fcl_stages", join(&p.fcl)),
            ("hfrf_spatial_stages", join(&p.hfrf_spatial)),
            ("hfrf_channel_stages", join(&p.hfrf_channel)),
            ("use_hfri", self.use_hfri.to_string()),
            ("use_hfrf_spatial", self.use_hfrf_spatial.to_string()),
            ("use_hfrf_channel", self.use_hfrf_channel.to_string()),
            ("use_fcl", self.use_fcl.to_string()),
            ("use_batchnorm", self.use_batchnorm.to_string()),
            ("fcl_mode", self.fcl_mode.to_string()),
            ("fcl_tied", self.fcl_tied.to_string()),
            ("cut", self.cut.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one key as named by [`ModelConfig::entries`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "input_size" => self.input_size = value(key, v)?,
            "base_channels" => self.base_channels = value(key, v)?,
            "ladder" => self.ladder = list(key, v)?,
            "fcl_stages" => self.placements.fcl = list(key, v)?,
            "hfrf_spatial_stages" => self.placements.hfrf_spatial = list(key, v)?,
            "hfrf_channel_stages" => self.placements.hfrf_channel = list(key, v)?,
            "use_hfri" => self.use_hfri = value(key, v)?,
            "use_hfrf_spatial" => self.use_hfrf_spatial = value(key, v)?,
            "use_hfrf_channel" => self.use_hfrf_channel = value(key, v)?,
            "use_fcl" => self.use_fcl = value(key, v)?,
            "use_batchnorm" => self.use_batchnorm = value(key, v)?,
            "fcl_mode" => self.fcl_mode = value(key, v)?,
            "fcl_tied" => self.fcl_tied = value(key, v)?,
            "cut" => self.cut = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct FclLayer {
    w_am: usize,
    b_am: usize,
    w_ph: usize,
    b_ph: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    conv1: ConvLayer,
    bn1: Option<BnLayer>,
    conv2: ConvLayer,
    bn2: Option<BnLayer>,
    shortcut: Option<(ConvLayer, Option<BnLayer>)>,
    fcl: Option<FclLayer>,
    hfrf_spatial: bool,
    hfrf_channel: bool,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvLayer,
    stem_bn: Option<BnLayer>,
    stages: Vec<Stage>,
    head_w: usize,
    head_b: usize,
}

/// Per-layer generator so that adding or removing a layer leaves the
/// initial values of every other layer untouched.
fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

struct Builder<T> {
    seed: u64,
    params: Vec<(String, Tensor<T>)>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push((name, t));
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let mut rng = layer_rng(self.seed, &name);
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * std)
        });
        self.push(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvLayer {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = self.normal(format!("{name}.w"), &[cout, cin, k, k], std);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, stride, pad: k / 2 }
    }

    fn bn(&mut self, name: &str, c: usize, enabled: bool) -> Option<BnLayer> {
        if !enabled {
            return None;
        }
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stats.push((name.to_string(), RunningStats::new(c)));
        Some(BnLayer { gamma, beta, stats: self.stats.len() - 1 })
    }

    fn fcl(&mut self, name: &str, c: usize, tied: bool) -> FclLayer {
        let std = (2.0 / c as f64).sqrt();
        let w_am = self.normal(format!("{name}.w_am"), &[c, c, 1, 1], std);
        let b_am = self.push(format!("{name}.b_am"), Tensor::zeros(&[c]));
        if tied {
            return FclLayer { w_am, b_am, w_ph: w_am, b_ph: b_am };
        }
        let w_ph = self.normal(format!("{name}.w_ph"), &[c, c, 1, 1], std);
        let b_ph = self.push(format!("{name}.b_ph"), Tensor::zeros(&[c]));
        FclLayer { w_am, b_am, w_ph, b_ph }
    }
}

/// Result of one forward pass recorded on a tape.
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Output of the last stage, N x C x h x w.
    pub features: Var,
    /// Tape handles of the parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Running statistics after this pass; unchanged in eval mode.
    pub stats: Vec<RunningStats<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<(String, Tensor<T>)>,
    stats: Vec<(String, RunningStats<T>)>,
}

/// Builds the canonical architecture with seeded initial parameters.
pub fn build_model<T: Real>(cfg: &ModelConfig) -> Result<Model<T>> {
    Model::new(cfg)
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { seed: cfg.seed, params: Vec::new(), stats: Vec::new() };
        let ch = cfg.channels();
        let bn = cfg.use_batchnorm;
        let stem = b.conv("stem.conv", INPUT_CHANNELS, ch[0], 3, 1);
        let stem_bn = b.bn("stem.bn", ch[0], bn);
        let mut stages = Vec::with_capacity(ch.len());
        let mut cin = ch[0];
        for (i, &cout) in ch.iter().enumerate() {
            let s = i + 1;
            let stride = if s == 1 { 1 } else { 2 };
            let name = format!("stage{s}");
            let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3, stride);
            let bn1 = b.bn(&format!("{name}.bn1"), cout, bn);
            let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
            let bn2 = b.bn(&format!("{name}.bn2"), cout, bn);
            let shortcut = (stride != 1 || cin != cout).then(|| {
                let conv = b.conv(&format!("{name}.proj"), cin, cout, 1, stride);
                (conv, b.bn(&format!("{name}.proj_bn"), cout, bn))
            });
            let p = &cfg.placements;
            let fcl = (cfg.use_fcl && p.fcl.contains(&s)).then(|| b.fcl(&format!("{name}.fcl"), cout, cfg.fcl_tied));
            stages.push(Stage {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
                fcl,
                hfrf_spatial: cfg.use_hfrf_spatial && p.hfrf_spatial.contains(&s),
                hfrf_channel: cfg.use_hfrf_channel && p.hfrf_channel.contains(&s),
            });
            cin = cout;
        }
        let last = *ch.last().expect("validated ladder");
        let head_w = b.normal("head.w".into(), &[NUM_CLASSES, last], (1.0 / last as f64).sqrt());
        let head_b = b.push("head.b".into(), Tensor::zeros(&[NUM_CLASSES]));
        let layout = Layout { stem, stem_bn, stages, head_w, head_b };
        Ok(Model { cfg: cfg.clone(), layout, params: b.params, stats: b.stats })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Running statistics keyed by batch-norm layer name.
    pub fn running_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn stats(&self, name: &str) -> Option<&RunningStats<T>> {
        self.stats.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Installs the running statistics produced by a train-mode pass.
    pub fn commit_stats(&mut self, stats: Vec<RunningStats<T>>) -> Result<()> {
        if stats.len() != self.stats.len() {
            return Err(Error::Contract(format!(
                "{} running statistics for {} batch-norm layers",
                stats.len(),
                self.stats.len()
            )));
        }
        for ((_, slot), new) in self.stats.iter_mut().zip(stats) {
            *slot = new;
        }
        Ok(())
    }

    /// Number of trainable scalars; running statistics are not counted.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Converts every parameter and statistic to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| (n.clone(), RunningStats { mean: conv(&s.mean), var: conv(&s.var) }))
                .collect(),
        }
    }

    /// Records the network on `tape` for a batch of N x 3 x S x S images.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let s = self.cfg.input_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("model expects N x 3 x {s} x {s}, got {shape:?}")));
        }
        let input = if self.cfg.use_hfri { hfri(x, &self.cfg.cut)? } else { x.clone() };
        let params: Vec<Var> = self.params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let mut stats: Vec<RunningStats<T>> = self.stats.iter().map(|(_, s)| s.clone()).collect();
        let spatial = self.cfg.cut.with_dims(FilterDims::Spatial);
        let channel = self.cfg.cut.with_dims(FilterDims::Channel);
        let l = &self.layout;

        let conv = |tape: &mut Tape<T>, x: Var, c: &ConvLayer| tape.conv2d(x, params[c.w], params[c.b], c.stride, c.pad);
        let mut norm = |tape: &mut Tape<T>, x: Var, bn: &Option<BnLayer>| match bn {
            Some(bn) => tape.batchnorm2d(x, params[bn.gamma], params[bn.beta], &mut stats[bn.stats], mode),
            None => Ok(x),
        };

        let mut h = tape.constant(input);
        h = conv(tape, h, &l.stem)?;
        h = norm(tape, h, &l.stem_bn)?;
        h = tape.relu(h)?;
        for st in &l.stages {
            let mut y = conv(tape, h, &st.conv1)?;
            y = norm(tape, y, &st.bn1)?;
            y = tape.relu(y)?;
            y = conv(tape, y, &st.conv2)?;
            y = norm(tape, y, &st.bn2)?;
            let skip = match &st.shortcut {
                Some((c, bn)) => {
                    let p = conv(tape, h, c)?;
                    norm(tape, p, bn)?
                }
                None => h,
            };
            y = tape.add(y, skip)?;
            h = tape.relu(y)?;
            if let Some(f) = &st.fcl {
                let p = FclParams { w_am: params[f.w_am], b_am: params[f.b_am], w_ph: params[f.w_ph], b_ph: params[f.b_ph] };
                h = fcl(tape, h, &p, self.cfg.fcl_mode)?;
                h = tape.relu(h)?;
            }
            if st.hfrf_spatial {
                h = hfrf_spatial(tape, h, &spatial)?;
            }
            if st.hfrf_channel {
                h = hfrf_channel(tape, h, &channel)?;
            }
        }
        let features = h;
        let pooled = tape.global_avg_pool(features)?;
        let logits = tape.linear(pooled, params[l.head_w], params[l.head_b])?;
        Ok(ForwardPass { logits, features, params, stats })
    }

    /// Eval-mode logits and last-stage features.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x, Mode::Eval)?;
        Ok((tape.tensor(pass.logits)?.clone(), tape.tensor(pass.features)?.clone()))
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.0)
    }

    /// Class activation map of one image (3 x S x S or 1 x 3 x S x S) for
    /// its predicted class, min-max normalized to [0, 1] and upsampled by
    /// nearest neighbour to S x S. A constant map normalizes to zeros.
    pub fn cam(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.cfg.input_size;
        let batch = match image.rank() {
            3 => image.clone().reshape(&[1, INPUT_CHANNELS, s, s])?,
            _ => image.clone(),
        };
        if batch.shape()[0] != 1 {
            return Err(Error::Shape(format!("cam takes one image, got {:?}", image.shape())));
        }
        let (logits, feats) = self.infer(&batch)?;
        let class = if logits.data()[1] > logits.data()[0] { 1 } else { 0 };
        let (c, fh, fw) = (feats.shape()[1], feats.shape()[2], feats.shape()[3]);
        let w = &self.params[self.layout.head_w].1.data()[class * c..(class + 1) * c];
        let mut map = vec![T::zero(); fh * fw];
        for (ch, &wc) in w.iter().enumerate() {
            for (m, &f) in map.iter_mut().zip(&feats.data()[ch * fh * fw..(ch + 1) * fh * fw]) {
                *m = *m + wc * f;
            }
        }
        let lo = map.iter().copied().fold(T::infinity(), T::min);
        let hi = map.iter().copied().fold(T::neg_infinity(), T::max);
        let range = hi - lo;
        let scale = T::one().max(hi.abs()).max(lo.abs());
        let degenerate = range <= T::epsilon() * T::of(16.0) * scale;
        Ok(Tensor::from_fn(&[s, s], |i| {
            let (r, col) = (i / s, i % s);
            let v = map[(r * fh / s) * fw + col * fw / s];
            if degenerate {
                T::zero()
            } else {
                (v - lo) / range
            }
        }))
    }

    /// Writes `config.txt`, `manifest.txt` and one tensor file per entry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg: Vec<(String, String)> =
            self.cfg.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        write(&dir.join("config.txt"), render_pairs(&cfg).as_bytes())?;
        let mut manifest = String::new();
        for (name, t) in self.entries() {
            let file = format!("{name}.fqt");
            write(&dir.join(&file), &encode_real(&t))?;
            manifest.push_str(&format!("{name},{file}\n"));
        }
        write(&dir.join("manifest.txt"), manifest.as_bytes())
    }

    /// Reads a checkpoint written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_text = read_text(&dir.join("config.txt"))?;
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_pairs(&cfg_text)? {
            let key = k
                .strip_prefix("model.")
                .ok_or_else(|| Error::Config(format!("checkpoint config key {k:?} outside the model section")))?;
            cfg.set(key, &v)?;
        }
        let mut model = Model::new(&cfg)?;
        let mut found: HashMap<String, Tensor<T>> = HashMap::new();
        for line in read_text(&dir.join("manifest.txt"))?.lines().filter(|l| !l.trim().is_empty()) {
            let (name, file) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let path = dir.join(file.trim());
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            found.insert(name.trim().to_string(), decode_real(&bytes)?);
        }
        let expected = model.entries().len();
        if found.len() != expected {
            return Err(Error::Format(format!("manifest lists {} tensors, model has {expected}", found.len())));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = found
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
            t.expect_shape(shape)?;
            Ok(t)
        };
        for (name, t) in model.params.iter_mut() {
            *t = take(name, &t.shape().to_vec())?;
        }
        for (name, s) in model.stats.iter_mut() {
            let c = s.mean.len();
            s.mean = take(&format!("{name}.running_mean"), &[c])?.into_data();
            s.var = take(&format!("{name}.running_var"), &[c])?.into_data();
        }
        Ok(model)
    }

    fn entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params.clone();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::from_vec(vec![c], s.mean.clone())));
            out.push((format!("{name}.running_var"), Tensor::from_vec(vec![c], s.var.clone())));
        }
        out
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
