//! The full two-stream, multi-person classifier.
//!
//! Per person, the skeleton sequence and its temporal-difference motion
//! stream each run coordinate-aware grouping, the joints-as-channels
//! transposition, and virtual-part-aware grouping; the streams are
//! concatenated and refined by two conv-pool stages, the temporal axis is
//! averaged away, per-person features fuse by elementwise maximum, and a
//! linear head produces the logits.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{pool2_clamped, Cag, CagSpec, Vag, VagSpec};
use crate::data::SkeletonSample;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Conv2dSpec, Dropout, Linear};
use crate::tape::{Ctx, Tape, Var};
use crate::tensor::{Element, Tensor4};

/// Width of the flattened feature entering the classifier head
/// (256 channels x 1 x 2 after the mean reduction).
pub const FEATURE_WIDTH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "ModelConfig::default_coords")]
    pub coords: usize,
    #[serde(default = "ModelConfig::default_frames")]
    pub frames: usize,
    #[serde(default = "ModelConfig::default_joints")]
    pub joints: usize,
    #[serde(default = "ModelConfig::default_classes")]
    pub classes: usize,
    #[serde(default = "ModelConfig::default_max_persons")]
    pub max_persons: usize,
    #[serde(default = "ModelConfig::default_n_cag")]
    pub n_cag: usize,
    #[serde(default = "ModelConfig::default_n_vag")]
    pub n_vag: usize,
    #[serde(default = "ModelConfig::default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    fn default_coords() -> usize {
        3
    }
    fn default_frames() -> usize {
        64
    }
    fn default_joints() -> usize {
        25
    }
    fn default_classes() -> usize {
        60
    }
    fn default_max_persons() -> usize {
        2
    }
    fn default_n_cag() -> usize {
        10
    }
    fn default_n_vag() -> usize {
        6
    }
    fn default_dropout() -> f64 {
        0.5
    }

    pub fn cag_spec(&self) -> CagSpec {
        CagSpec { in_coords: self.coords, groups: self.n_cag, ..CagSpec::default() }
    }

    pub fn vag_spec(&self) -> VagSpec {
        VagSpec { in_joints: self.joints, groups: self.n_vag, ..VagSpec::default() }
    }

    /// Halves one pooled extent; extent 1 passes through (the pool kernel
    /// clamps), anything else must be even.
    pub fn halve(extent: usize) -> Result<usize> {
        match extent {
            1 => Ok(1),
            e if e % 2 == 0 => Ok(e / 2),
            e => Err(Error::config(format!(
                "temporal extent {e} cannot be pooled; use 1 or an even value"
            ))),
        }
    }

    /// The four temporal extents after each pooling stage.
    pub fn temporal_chain(&self) -> Result<[usize; 4]> {
        let t1 = Self::halve(self.frames)?;
        let t2 = Self::halve(t1)?;
        let t3 = Self::halve(t2)?;
        let t4 = Self::halve(t3)?;
        Ok([t1, t2, t3, t4])
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("frames must be >= 2 for the motion stream".to_string()));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes".to_string()));
        }
        if self.max_persons == 0 {
            return Err(Error::config("max_persons must be >= 1".to_string()));
        }
        self.cag_spec().validate()?;
        self.vag_spec().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.temporal_chain()?;
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            coords: Self::default_coords(),
            frames: Self::default_frames(),
            joints: Self::default_joints(),
            classes: Self::default_classes(),
            max_persons: Self::default_max_persons(),
            n_cag: Self::default_n_cag(),
            n_vag: Self::default_n_vag(),
            dropout: Self::default_dropout(),
        }
    }
}

/// One stream's feature extractor: coordinate block, transposition,
/// joint block.
#[derive(Clone)]
pub struct StreamNet<E: Element> {
    pub cag: Cag<E>,
    pub vag: Vag<E>,
}

impl<E: Element> StreamNet<E> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(StreamNet { cag: Cag::new(config.cag_spec(), rng)?, vag: Vag::new(config.vag_spec(), rng)? })
    }

    /// `(P, C, T, V)` coordinates to `(P, 64, T/4, 8)` features plus the
    /// two attention gates.
    fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<(Var, Var, Var)> {
        let (c_out, cag_gate) = self.cag.forward(tape, x, ctx)?;
        let transposed = tape.permute(c_out, [0, 3, 2, 1])?;
        ctx.trace_shape("transpose", tape.dims(transposed));
        let (v_out, vag_gate) = self.vag.forward(tape, transposed, ctx)?;
        Ok((v_out, cag_gate, vag_gate))
    }
}

/// Per-person forward output: the pre-fusion feature and the skeleton
/// branch's attention gates.
pub struct PersonOut {
    pub feature: Var,
    pub cag_gate: Var,
    pub vag_gate: Var,
}

/// The assembled network.
pub struct TaCnn<E: Element> {
    pub config: ModelConfig,
    pub skeleton: StreamNet<E>,
    pub motion: StreamNet<E>,
    pub fuse1: Conv2d<E>,
    pub fuse2: Conv2d<E>,
    pub head: Linear<E>,
    pub dropout: Dropout,
    /// Optimizer steps taken; persisted in checkpoints.
    pub step: u64,
}

impl<E: Element> Clone for TaCnn<E> {
    fn clone(&self) -> Self {
        TaCnn {
            config: self.config.clone(),
            skeleton: self.skeleton.clone(),
            motion: self.motion.clone(),
            fuse1: self.fuse1.clone(),
            fuse2: self.fuse2.clone(),
            head: self.head.clone(),
            dropout: self.dropout.clone(),
            step: self.step,
        }
    }
}

impl<E: Element> TaCnn<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let skeleton = StreamNet::new(&config, &mut rng)?;
        let motion = StreamNet::new(&config, &mut rng)?;
        let fuse1 = Conv2d::new(Conv2dSpec::new(128, 128, (3, 3), 1, (1, 1)), &mut rng)?;
        let fuse2 = Conv2d::new(Conv2dSpec::new(128, 256, (3, 3), 1, (1, 1)), &mut rng)?;
        let head = Linear::new(FEATURE_WIDTH, config.classes, &mut rng)?;
        let dropout = Dropout::new(config.dropout)?;
        Ok(TaCnn { config, skeleton, motion, fuse1, fuse2, head, dropout, step: 0 })
    }

    /// Forward temporal difference with a zero-padded final frame; the
    /// second input stream.
    pub fn motion_stream(x: &Tensor4<E>) -> Result<Tensor4<E>> {
        let mut tape = Tape::inference();
        let xv = tape.leaf(x.clone());
        let m = tape.motion(xv)?;
        Ok(tape.value(m).clone())
    }

    /// Runs one or more persons (stacked on the batch axis) through both
    /// streams up to the pre-fusion feature `(P, 256, 1, 2)`.
    pub fn forward_person(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<PersonOut> {
        let d = tape.dims(x);
        if d[1] != self.config.coords || d[2] != self.config.frames || d[3] != self.config.joints {
            return Err(Error::shape(format!(
                "forward expects (P, {}, {}, {}), got {d:?}",
                self.config.coords, self.config.frames, self.config.joints
            )));
        }
        let motion_in = tape.motion(x)?;
        let (skel, cag_gate, vag_gate) = self.skeleton.forward(tape, x, ctx)?;
        let (mot, _, _) = self.motion.forward(tape, motion_in, ctx)?;
        // Skeleton-stream channels first.
        let cat = tape.concat(&[skel, mot], 1)?;
        ctx.trace_shape("concat", tape.dims(cat));
        let h = self.dropout.forward(tape, cat, ctx)?;
        let h = self.fuse1.forward(tape, h, ctx)?;
        let h = pool2_clamped(tape, h)?;
        let h = tape.relu(h);
        ctx.trace_shape("fuse1", tape.dims(h));
        let h = self.dropout.forward(tape, h, ctx)?;
        let h = self.fuse2.forward(tape, h, ctx)?;
        let h = pool2_clamped(tape, h)?;
        let h = tape.relu(h);
        ctx.trace_shape("fuse2", tape.dims(h));
        let feature = tape.reduce_mean(h, 2)?;
        ctx.trace_shape("mean", tape.dims(feature));
        Ok(PersonOut { feature, cag_gate, vag_gate })
    }

    /// Elementwise-maximum fusion over per-person features.
    pub fn fuse_features(tape: &mut Tape<E>, features: &[Var]) -> Result<Var> {
        let mut it = features.iter();
        let mut fused = *it
            .next()
            .ok_or_else(|| Error::input("maxout fusion over zero features".to_string()))?;
        for &f in it {
            fused = tape.emax(fused, f)?;
        }
        Ok(fused)
    }

    fn head_logits(&self, tape: &mut Tape<E>, fused: Var, ctx: &mut Ctx) -> Result<Var> {
        let d = tape.dims(fused);
        let flat = tape.reshape(fused, [d[0], d[1] * d[2] * d[3], 1, 1])?;
        let dropped = self.dropout.forward(tape, flat, ctx)?;
        let logits = self.head.forward(tape, dropped, ctx)?;
        ctx.trace_shape("logits", tape.dims(logits));
        Ok(logits)
    }

    /// Classifies one sample given as per-person tensors `(1, C, T, V)`.
    pub fn forward(&self, tape: &mut Tape<E>, persons: &[Var], ctx: &mut Ctx) -> Result<Var> {
        if persons.is_empty() {
            return Err(Error::input("forward needs at least one person".to_string()));
        }
        if persons.len() > self.config.max_persons {
            return Err(Error::input(format!(
                "{} persons exceed the configured maximum {}",
                persons.len(),
                self.config.max_persons
            )));
        }
        let mut features = Vec::with_capacity(persons.len());
        let mut gates = None;
        for &p in persons {
            let out = self.forward_person(tape, p, ctx)?;
            features.push(out.feature);
            gates.get_or_insert((out.cag_gate, out.vag_gate));
        }
        let fused = Self::fuse_features(tape, &features)?;
        ctx.trace_shape("maxout", tape.dims(fused));
        self.head_logits(tape, fused, ctx)
    }

    /// Batched forward: all persons of all samples are stacked on the
    /// batch axis and run through the streams once; each sample's persons
    /// are then max-fused. Returns `(B, K, 1, 1)` logits.
    pub fn forward_batch(&self, tape: &mut Tape<E>, samples: &[Vec<Var>], ctx: &mut Ctx) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::input("forward_batch over an empty batch".to_string()));
        }
        let mut stacked = Vec::new();
        for persons in samples {
            if persons.is_empty() {
                return Err(Error::input("sample without persons".to_string()));
            }
            if persons.len() > self.config.max_persons {
                return Err(Error::input(format!(
                    "{} persons exceed the configured maximum {}",
                    persons.len(),
                    self.config.max_persons
                )));
            }
            stacked.extend_from_slice(persons);
        }
        let all = tape.concat(&stacked, 0)?;
        let out = self.forward_person(tape, all, ctx)?;
        let mut fused_rows = Vec::with_capacity(samples.len());
        let mut offset = 0;
        for persons in samples {
            let m = persons.len();
            let mut rows = Vec::with_capacity(m);
            for i in 0..m {
                rows.push(tape.narrow(out.feature, 0, offset + i, 1)?);
            }
            offset += m;
            fused_rows.push(Self::fuse_features(tape, &rows)?);
        }
        let fused = tape.concat(&fused_rows, 0)?;
        self.head_logits(tape, fused, ctx)
    }

    /// Eval-mode logits for a stored sample.
    pub fn logits_for_sample(&self, sample: &SkeletonSample) -> Result<Vec<E>> {
        let mut tape = Tape::inference();
        let persons: Vec<Var> =
            sample.persons.iter().map(|p| tape.leaf(p.cast::<E>())).collect();
        let mut ctx = Ctx::eval();
        let logits = self.forward(&mut tape, &persons, &mut ctx)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Canonical (name, tensor) listing of every trainable parameter.
    pub fn named_params(&self) -> Vec<(String, &Tensor4<E>)> {
        let mut out = Vec::new();
        for (stream, net) in [("skeleton", &self.skeleton), ("motion", &self.motion)] {
            collect_conv(&mut out, format!("{stream}.cag.map_hi"), &net.cag.map_hi);
            out.push((format!("{stream}.cag.bn.gamma"), &net.cag.bn.gamma));
            out.push((format!("{stream}.cag.bn.beta"), &net.cag.bn.beta));
            collect_conv(&mut out, format!("{stream}.cag.map_lo"), &net.cag.map_lo);
            collect_conv(&mut out, format!("{stream}.cag.se.fc1"), &net.cag.se.fc1);
            collect_conv(&mut out, format!("{stream}.cag.se.fc2"), &net.cag.se.fc2);
            collect_conv(&mut out, format!("{stream}.cag.dual.a"), &net.cag.dual.branch_a);
            collect_conv(&mut out, format!("{stream}.cag.dual.b"), &net.cag.dual.branch_b);
            collect_conv(&mut out, format!("{stream}.cag.map_out"), &net.cag.map_out);
            collect_conv(&mut out, format!("{stream}.vag.map_in"), &net.vag.map_in);
            collect_conv(&mut out, format!("{stream}.vag.se.fc1"), &net.vag.se.fc1);
            collect_conv(&mut out, format!("{stream}.vag.se.fc2"), &net.vag.se.fc2);
            collect_conv(&mut out, format!("{stream}.vag.dual.a"), &net.vag.dual.branch_a);
            collect_conv(&mut out, format!("{stream}.vag.dual.b"), &net.vag.dual.branch_b);
            collect_conv(&mut out, format!("{stream}.vag.map_out"), &net.vag.map_out);
            collect_conv(&mut out, format!("{stream}.vag.tail"), &net.vag.tail);
        }
        collect_conv(&mut out, "fuse1".to_string(), &self.fuse1);
        collect_conv(&mut out, "fuse2".to_string(), &self.fuse2);
        out.push(("head.weight".to_string(), self.head.weight()));
        out.push(("head.bias".to_string(), self.head.bias()));
        out
    }

    /// Mutable variant of `named_params`, same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor4<E>)> {
        let mut out: Vec<(String, &mut Tensor4<E>)> = Vec::new();
        for (stream, net) in
            [("skeleton", &mut self.skeleton), ("motion", &mut self.motion)]
        {
            collect_conv_mut(&mut out, format!("{stream}.cag.map_hi"), &mut net.cag.map_hi);
            out.push((format!("{stream}.cag.bn.gamma"), &mut net.cag.bn.gamma));
            out.push((format!("{stream}.cag.bn.beta"), &mut net.cag.bn.beta));
            collect_conv_mut(&mut out, format!("{stream}.cag.map_lo"), &mut net.cag.map_lo);
            collect_conv_mut(&mut out, format!("{stream}.cag.se.fc1"), &mut net.cag.se.fc1);
            collect_conv_mut(&mut out, format!("{stream}.cag.se.fc2"), &mut net.cag.se.fc2);
            collect_conv_mut(&mut out, format!("{stream}.cag.dual.a"), &mut net.cag.dual.branch_a);
            collect_conv_mut(&mut out, format!("{stream}.cag.dual.b"), &mut net.cag.dual.branch_b);
            collect_conv_mut(&mut out, format!("{stream}.cag.map_out"), &mut net.cag.map_out);
            collect_conv_mut(&mut out, format!("{stream}.vag.map_in"), &mut net.vag.map_in);
            collect_conv_mut(&mut out, format!("{stream}.vag.se.fc1"), &mut net.vag.se.fc1);
            collect_conv_mut(&mut out, format!("{stream}.vag.se.fc2"), &mut net.vag.se.fc2);
            collect_conv_mut(&mut out, format!("{stream}.vag.dual.a"), &mut net.vag.dual.branch_a);
            collect_conv_mut(&mut out, format!("{stream}.vag.dual.b"), &mut net.vag.dual.branch_b);
            collect_conv_mut(&mut out, format!("{stream}.vag.map_out"), &mut net.vag.map_out);
            collect_conv_mut(&mut out, format!("{stream}.vag.tail"), &mut net.vag.tail);
        }
        collect_conv_mut(&mut out, "fuse1".to_string(), &mut self.fuse1);
        collect_conv_mut(&mut out, "fuse2".to_string(), &mut self.fuse2);
        let (hw, hb) = self.head.params_mut();
        out.push(("head.weight".to_string(), hw));
        out.push(("head.bias".to_string(), hb));
        out
    }

    /// Non-trainable state (batch-norm running statistics), by name.
    pub fn named_buffers(&self) -> Vec<(String, Tensor4<E>)> {
        let mut out = Vec::new();
        for (stream, net) in [("skeleton", &self.skeleton), ("motion", &self.motion)] {
            let (mean, var) = net.cag.bn.running_stats();
            out.push((format!("{stream}.cag.bn.running_mean"), mean));
            out.push((format!("{stream}.cag.bn.running_var"), var));
        }
        out
    }

    fn set_buffer(&self, name: &str, value: Tensor4<E>) -> Result<()> {
        for (stream, net) in [("skeleton", &self.skeleton), ("motion", &self.motion)] {
            let (mean, var) = net.cag.bn.running_stats();
            if name == format!("{stream}.cag.bn.running_mean") {
                return net.cag.bn.set_running_stats(value, var);
            }
            if name == format!("{stream}.cag.bn.running_var") {
                return net.cag.bn.set_running_stats(mean, value);
            }
        }
        Err(Error::format(format!("unknown buffer '{name}'")))
    }

    /// Total trainable scalar count, by enumeration.
    pub fn param_scalars(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.numel() as u64).sum()
    }
}

fn collect_conv<'a, E: Element>(
    out: &mut Vec<(String, &'a Tensor4<E>)>,
    prefix: String,
    conv: &'a Conv2d<E>,
) {
    out.push((format!("{prefix}.weight"), &conv.weight));
    if let Some(b) = conv.bias.as_ref() {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn collect_conv_mut<'a, E: Element>(
    out: &mut Vec<(String, &'a mut Tensor4<E>)>,
    prefix: String,
    conv: &'a mut Conv2d<E>,
) {
    out.push((format!("{prefix}.weight"), &mut conv.weight));
    if let Some(b) = conv.bias.as_mut() {
        out.push((format!("{prefix}.bias"), b));
    }
}

// ---- checkpoint format ----------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TACN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    step: u64,
}

impl TaCnn<f32> {
    /// Serializes the model: magic, version, a length-prefixed JSON block
    /// with the config and step counter, then each parameter and buffer as
    /// (name length, name, 4 extents, little-endian f32 data).
    pub fn save_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&CheckpointMeta { config: self.config.clone(), step: self.step })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let params = self.named_params();
        let buffers = self.named_buffers();
        out.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
        let mut write_tensor = |name: &str, t: &Tensor4<f32>| -> Result<()> {
            if name.len() > u16::MAX as usize {
                return Err(Error::format(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(())
        };
        for (name, t) in &params {
            write_tensor(name, t)?;
        }
        for (name, t) in &buffers {
            write_tensor(name, t)?;
        }
        Ok(out)
    }

    pub fn load_bytes(bytes: &[u8]) -> Result<TaCnn<f32>> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("checkpoint too short".to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v).map_err(|_| Error::format("checkpoint too short".to_string()))?;
        let version = u16::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4).map_err(|_| Error::format("truncated config block".to_string()))?;
        let json_len = u32::from_le_bytes(len4) as usize;
        if json_len > r.len() {
            return Err(Error::format("config block overruns the file".to_string()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..json_len])?;
        r = &r[json_len..];
        let mut model = TaCnn::<f32>::new(meta.config, 0)?;
        model.step = meta.step;

        r.read_exact(&mut len4).map_err(|_| Error::format("truncated tensor count".to_string()))?;
        let count = u32::from_le_bytes(len4) as usize;
        let expected = model.named_params().len() + model.named_buffers().len();
        if count != expected {
            return Err(Error::format(format!(
                "checkpoint holds {count} tensors, model needs {expected}"
            )));
        }
        for _ in 0..count {
            let mut l2 = [0u8; 2];
            r.read_exact(&mut l2).map_err(|_| Error::format("truncated tensor name".to_string()))?;
            let name_len = u16::from_le_bytes(l2) as usize;
            if name_len > r.len() {
                return Err(Error::format("tensor name overruns the file".to_string()));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| Error::format("tensor name is not UTF-8".to_string()))?
                .to_string();
            r = &r[name_len..];
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                r.read_exact(&mut len4)
                    .map_err(|_| Error::format(format!("truncated dims for {name}")))?;
                *d = u32::from_le_bytes(len4) as usize;
            }
            let n: usize = dims.iter().product();
            if n.saturating_mul(4) > r.len() {
                return Err(Error::format(format!("tensor {name} overruns the file")));
            }
            let mut data = Vec::with_capacity(n);
            for chunk in r[..n * 4].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            r = &r[n * 4..];
            let tensor = Tensor4::from_vec(dims, data)
                .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;

            let mut found = false;
            for (pname, p) in model.named_params_mut() {
                if pname == name {
                    if p.dims() != dims {
                        return Err(Error::format(format!(
                            "tensor {name}: checkpoint dims {dims:?} vs model {:?}",
                            p.dims()
                        )));
                    }
                    *p = tensor.clone().requires_grad(true);
                    found = true;
                    break;
                }
            }
            if !found {
                model.set_buffer(&name, tensor)?;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.save_bytes()?;
        File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TaCnn<f32>> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::load_bytes(&bytes)
    }
}

// ---- ensemble and attention export ----------------------------------------

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean of the member models' softmax probabilities.
pub fn ensemble_predict<E: Element>(models: &[&TaCnn<E>], sample: &SkeletonSample) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::input("ensemble of zero models".to_string()));
    }
    let first = &models[0].config;
    for m in models {
        let c = &m.config;
        if (c.coords, c.frames, c.joints, c.classes)
            != (first.coords, first.frames, first.joints, first.classes)
        {
            return Err(Error::config(
                "ensemble members disagree on (C, T, V, K)".to_string(),
            ));
        }
    }
    let mut mean = vec![0.0f64; first.classes];
    for m in models {
        let logits: Vec<f64> =
            m.logits_for_sample(sample)?.iter().map(|v| v.to_f64_lossy()).collect();
        for (acc, p) in mean.iter_mut().zip(softmax_f64(&logits)) {
            *acc += p;
        }
    }
    for v in mean.iter_mut() {
        *v /= models.len() as f64;
    }
    Ok(mean)
}

/// Per-(block, channel, class) mean attention gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub block: &'static str,
    pub channel: usize,
    pub class: usize,
    pub mean_gate: f64,
}

/// Eval-mode mean SE gates of the skeleton branch, accumulated per class
/// over every person pass of the dataset.
pub fn export_attention<E: Element>(
    model: &TaCnn<E>,
    samples: &[SkeletonSample],
) -> Result<Vec<AttentionRow>> {
    if samples.is_empty() {
        return Err(Error::input("attention export over an empty dataset".to_string()));
    }
    let cag_c = model.skeleton.cag.spec.grouped;
    let vag_c = model.skeleton.vag.spec.grouped;
    let k = model.config.classes;
    let mut sums = vec![vec![0.0f64; cag_c + vag_c]; k];
    let mut counts = vec![0usize; k];
    for s in samples {
        if s.classes() != k {
            return Err(Error::input(format!(
                "sample {} has {} classes, model expects {k}",
                s.id,
                s.classes()
            )));
        }
        let class = s.class();
        let mut tape = Tape::inference();
        let mut ctx = Ctx::eval();
        for p in &s.persons {
            let xv = tape.leaf(p.cast::<E>());
            let out = model.forward_person(&mut tape, xv, &mut ctx)?;
            let cg = tape.value(out.cag_gate).clone();
            let vg = tape.value(out.vag_gate).clone();
            for c in 0..cag_c {
                sums[class][c] += cg.at([0, c, 0, 0]).to_f64_lossy();
            }
            for c in 0..vag_c {
                sums[class][cag_c + c] += vg.at([0, c, 0, 0]).to_f64_lossy();
            }
            counts[class] += 1;
        }
    }
    let mut rows = Vec::new();
    for class in 0..k {
        if counts[class] == 0 {
            continue;
        }
        let n = counts[class] as f64;
        for c in 0..cag_c {
            rows.push(AttentionRow { block: "cag", channel: c, class, mean_gate: sums[class][c] / n });
        }
        for c in 0..vag_c {
            rows.push(AttentionRow {
                block: "vag",
                channel: c,
                class,
                mean_gate: sums[class][cag_c + c] / n,
            });
        }
    }
    Ok(rows)
}

/// CSV rendering with the `block,channel,class,mean_gate` header.
pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut out = String::from("block,channel,class,mean_gate\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.block, r.channel, r.class, r.mean_gate));
    }
    out
}
