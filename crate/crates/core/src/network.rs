//! 3D U-Net backbone with a voxel projection head, parameter storage, and
//! checkpoint serialization.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Architecture hyperparameters; output shapes and parameter count are pure
/// functions of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    /// Encoder levels including the bottleneck.
    pub depth: usize,
    pub embedding_dim: usize,
    /// Output stride of the decoder stage feeding the projection head.
    pub projection_tap_stride: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 3,
            base_channels: 8,
            depth: 4,
            embedding_dim: 64,
            projection_tap_stride: 4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.base_channels < 1 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("segmentation needs at least 2 classes".into()));
        }
        if self.depth < 3 {
            return Err(Error::Config(format!("depth must be at least 3, got {}", self.depth)));
        }
        if self.embedding_dim < 8 {
            return Err(Error::Config(format!(
                "embedding dim must be at least 8, got {}",
                self.embedding_dim
            )));
        }
        let tap = self.projection_tap_stride;
        let valid = tap.is_power_of_two() && tap <= (1 << (self.depth - 2));
        if !valid {
            return Err(Error::Config(format!(
                "projection tap stride {tap} is not a decoder stride for depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Spatial divisor the input must satisfy.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn stage_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named parameter arrays shared (zero-copy) with each training tape.
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, Rc<ArrayD<S>>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    fn from_entries(entries: Vec<(String, Rc<ArrayD<S>>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ParamStore { entries, index }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> &Rc<ArrayD<S>> {
        &self.entries[self.index[name]].1
    }

    pub fn value_mut(&mut self, i: usize) -> &mut ArrayD<S> {
        Rc::make_mut(&mut self.entries[i].1)
    }

    pub fn entry(&self, i: usize) -> (&str, &Rc<ArrayD<S>>) {
        let (n, v) = &self.entries[i];
        (n.as_str(), v)
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// SHA-256 over names, shapes and values (as f64 bits); identical across
    /// the f32/f64 instantiations for f32-representable values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in v.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &x in v.iter() {
                h.update(x.to_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bundle of tape handles produced by one forward pass.
pub struct NetOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    pub embeddings: Option<Tensor>,
    pub embedding_stride: usize,
}

/// Softmax probabilities materialised for inference.
pub struct ProbabilityMap<S: Scalar> {
    /// `[N, C, D, H, W]`, per-voxel channel sums equal 1.
    pub data: ArrayD<S>,
}

/// The segmentation network.
pub struct UNet3d<S: Scalar> {
    cfg: NetworkConfig,
    pub params: ParamStore<S>,
}

struct ParamBuilder<S: Scalar> {
    rng: ChaCha8Rng,
    entries: Vec<(String, Rc<ArrayD<S>>)>,
}

impl<S: Scalar> ParamBuilder<S> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let std = (2.0 / (cin * k * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = ArrayD::from_shape_fn(vec![cout, cin, k, k, k], |_| {
            S::from_f64(dist.sample(&mut self.rng))
        });
        self.entries.push((format!("{name}.weight"), Rc::new(w)));
    }

    fn bias(&mut self, name: &str, c: usize) {
        self.entries
            .push((format!("{name}.bias"), Rc::new(ArrayD::zeros(vec![c]))));
    }

    /// Small random bias: keeps projection outputs away from the exact zero
    /// vector, which has no L2 direction.
    fn bias_random(&mut self, name: &str, c: usize, std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        let b = ArrayD::from_shape_fn(vec![c], |_| S::from_f64(dist.sample(&mut self.rng)));
        self.entries.push((format!("{name}.bias"), Rc::new(b)));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.entries
            .push((format!("{name}.gamma"), Rc::new(ArrayD::from_elem(vec![c], S::one()))));
        self.entries
            .push((format!("{name}.beta"), Rc::new(ArrayD::zeros(vec![c]))));
    }

    /// conv3 -> norm -> relu -> conv3 -> norm -> relu
    fn block(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(&format!("{name}.conv1"), cout, cin, 3);
        self.norm(&format!("{name}.norm1"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        self.norm(&format!("{name}.norm2"), cout);
    }
}

impl<S: Scalar> UNet3d<S> {
    /// Builds a network with He-initialised weights.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::<S> { rng: ChaCha8Rng::seed_from_u64(seed), entries: Vec::new() };
        for i in 0..cfg.depth {
            let cin = if i == 0 { cfg.in_channels } else { cfg.stage_channels(i - 1) };
            b.block(&format!("enc{i}"), cin, cfg.stage_channels(i));
        }
        for i in (0..cfg.depth - 1).rev() {
            let cin = cfg.stage_channels(i + 1) + cfg.stage_channels(i);
            b.block(&format!("dec{i}"), cin, cfg.stage_channels(i));
        }
        b.conv("final", cfg.num_classes, cfg.base_channels, 1);
        b.bias("final", cfg.num_classes);
        let tap_level = cfg.projection_tap_stride.trailing_zeros() as usize;
        let tap_ch = cfg.stage_channels(tap_level);
        b.conv("head.conv1", tap_ch, tap_ch, 1);
        b.norm("head.norm", tap_ch);
        b.conv("head.conv2", cfg.embedding_dim, tap_ch, 1);
        b.bias_random("head.conv2", cfg.embedding_dim, 0.1);
        Ok(UNet3d { cfg, params: ParamStore::from_entries(b.entries) })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Parameter count implied by a config, without building the network.
    pub fn expected_param_count(cfg: &NetworkConfig) -> usize {
        let block = |cin: usize, cout: usize| cout * cin * 27 + 2 * cout + cout * cout * 27 + 2 * cout;
        let mut total = 0usize;
        for i in 0..cfg.depth {
            let cin = if i == 0 { cfg.in_channels } else { cfg.stage_channels(i - 1) };
            total += block(cin, cfg.stage_channels(i));
        }
        for i in 0..cfg.depth - 1 {
            total += block(cfg.stage_channels(i + 1) + cfg.stage_channels(i), cfg.stage_channels(i));
        }
        total += cfg.num_classes * cfg.base_channels + cfg.num_classes;
        let tap_ch = cfg.stage_channels(cfg.projection_tap_stride.trailing_zeros() as usize);
        total += tap_ch * tap_ch + 2 * tap_ch + cfg.embedding_dim * tap_ch + cfg.embedding_dim;
        total
    }

    /// Registers every parameter on `tape`; returns handles aligned with the
    /// store's entry order.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundParams {
        let handles = self
            .params
            .entries
            .iter()
            .map(|(_, v)| tape.leaf_shared(Rc::clone(v), true))
            .collect();
        BoundParams { handles, index: self.params.index.clone() }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::Shape(format!(
                "expected input [N, C, D, H, W], got {} dims",
                shape.len()
            )));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        let div = self.cfg.spatial_divisor();
        for (axis, &extent) in shape[2..].iter().enumerate() {
            if extent == 0 || extent % div != 0 {
                return Err(Error::Shape(format!(
                    "spatial axis {axis} has extent {extent}, not divisible by {div} (depth {})",
                    self.cfg.depth
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass producing logits, softmax probabilities and (when
    /// requested) unit-norm voxel embeddings at the projection tap stride.
    pub fn forward(
        &self,
        tape: &Tape<S>,
        params: &BoundParams,
        x: Tensor,
        with_embeddings: bool,
    ) -> Result<NetOutput> {
        self.check_input(&tape.shape(x))?;
        let eps = S::from_f64(1e-5);
        let p = |name: &str| params.get(name);
        let block = |input: Tensor, name: &str| -> Tensor {
            let c1 = tape.conv3d(input, p(&format!("{name}.conv1.weight")), None);
            let n1 = tape.instance_norm(
                c1,
                p(&format!("{name}.norm1.gamma")),
                p(&format!("{name}.norm1.beta")),
                eps,
            );
            let r1 = tape.relu(n1);
            let c2 = tape.conv3d(r1, p(&format!("{name}.conv2.weight")), None);
            let n2 = tape.instance_norm(
                c2,
                p(&format!("{name}.norm2.gamma")),
                p(&format!("{name}.norm2.beta")),
                eps,
            );
            tape.relu(n2)
        };

        let mut skips = Vec::with_capacity(self.cfg.depth - 1);
        let mut cur = x;
        for i in 0..self.cfg.depth {
            if i > 0 {
                cur = tape.maxpool2(cur);
            }
            cur = block(cur, &format!("enc{i}"));
            if i < self.cfg.depth - 1 {
                skips.push(cur);
            }
        }
        let tap_level = self.cfg.projection_tap_stride.trailing_zeros() as usize;
        let mut tap_feat = None;
        for i in (0..self.cfg.depth - 1).rev() {
            cur = tape.upsample2_trilinear(cur);
            cur = tape.concat_channels(cur, skips[i]);
            cur = block(cur, &format!("dec{i}"));
            if i == tap_level {
                tap_feat = Some(cur);
            }
        }
        let logits = tape.conv3d(cur, p("final.weight"), Some(p("final.bias")));
        let probs = tape.softmax_channels(logits);
        let embeddings = if with_embeddings {
            let feat = tap_feat.expect("tap level is a decoder stage");
            let h1 = tape.conv3d(feat, p("head.conv1.weight"), None);
            let hn = tape.instance_norm(h1, p("head.norm.gamma"), p("head.norm.beta"), eps);
            let hr = tape.relu(hn);
            let h2 = tape.conv3d(hr, p("head.conv2.weight"), Some(p("head.conv2.bias")));
            Some(tape.l2_normalize_channels(h2, S::from_f64(1e-12)))
        } else {
            None
        };
        Ok(NetOutput {
            logits,
            probs,
            embeddings,
            embedding_stride: self.cfg.projection_tap_stride,
        })
    }

    /// Inference-only forward: no gradients, no projection head.
    pub fn predict_probs(&self, x: &ArrayD<S>) -> Result<ProbabilityMap<S>> {
        let tape = Tape::<S>::no_grad();
        let params = self.bind(&tape);
        let input = tape.leaf(x.clone(), false);
        let out = self.forward(&tape, &params, input, false)?;
        Ok(ProbabilityMap { data: tape.value(out.probs).as_ref().clone() })
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct BoundParams {
    handles: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Tensor {
        self.handles[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))]
    }

    pub fn handles(&self) -> &[Tensor] {
        &self.handles
    }
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 8] = b"RCPSNET1";

/// Step/epoch/seed bookkeeping stored inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    param_hash: String,
    config: NetworkConfig,
    state: CheckpointMeta,
}

fn write_archive<S: Scalar, W: Write>(w: &mut W, items: &[(String, Rc<ArrayD<S>>)]) -> Result<()> {
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, v) in items {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[v.ndim() as u8])?;
        for &d in v.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in v.iter() {
            w.write_all(&x.to_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_archive<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, ArrayD<S>)>> {
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint contains a non-UTF8 parameter name".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut f64buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut f64buf)?;
            data.push(S::from_f64(f64::from_le_bytes(f64buf)));
        }
        items.push((
            name,
            ArrayD::from_shape_vec(shape, data)
                .map_err(|e| Error::Format(format!("bad checkpoint array: {e}")))?,
        ));
    }
    Ok(items)
}

/// Writes network parameters (and optional optimizer state) to one file.
pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    net: &UNet3d<S>,
    meta: &CheckpointMeta,
    optimizer_state: Option<&[(String, Rc<ArrayD<S>>)]>,
) -> Result<()> {
    let header = CheckpointHeader {
        param_hash: net.params.content_hash(),
        config: net.cfg.clone(),
        state: meta.clone(),
    };
    let header_text = toml::to_string(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(header_text.as_bytes());
    write_archive(&mut buf, &net.params.entries)?;
    match optimizer_state {
        Some(state) => {
            buf.push(1);
            write_archive(&mut buf, state)?;
        }
        None => buf.push(0),
    }
    // Atomic replace: never leave a torn checkpoint behind.
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint; when `expected` is given the stored config must match.
#[allow(clippy::type_complexity)]
pub fn load_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    expected: Option<&NetworkConfig>,
) -> Result<(UNet3d<S>, CheckpointMeta, Option<Vec<(String, ArrayD<S>)>>)> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = toml::from_str(
        std::str::from_utf8(&bytes[12..12 + hlen])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if let Some(want) = expected {
        if *want != header.config {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with a different network config ({:?} vs {:?})",
                header.config, want
            )));
        }
    }
    let mut cursor = &bytes[12 + hlen..];
    let params = read_archive::<S, _>(&mut cursor)?;
    let mut flag = [0u8; 1];
    cursor.read_exact(&mut flag)?;
    let opt_state = if flag[0] == 1 { Some(read_archive::<S, _>(&mut cursor)?) } else { None };

    let mut net = UNet3d::<S>::new(header.config.clone(), header.state.seed)?;
    if net.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter arrays, expected {}",
            params.len(),
            net.params.len()
        )));
    }
    for (i, (name, value)) in params.into_iter().enumerate() {
        let (expect_name, expect_val) = net.params.entry(i);
        if expect_name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: '{name}' where '{expect_name}' expected"
            )));
        }
        if expect_val.shape() != value.shape() {
            return Err(Error::Checkpoint(format!("parameter '{name}' has wrong shape")));
        }
        *net.params.value_mut(i) = value;
    }
    if net.params.content_hash() != header.param_hash {
        return Err(Error::Format("checkpoint hash mismatch; file corrupted".into()));
    }
    Ok((net, header.state, opt_state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            num_classes: 3,
            base_channels: 2,
            depth: 3,
            embedding_dim: 8,
            projection_tap_stride: 2,
        }
    }

    fn forward_once(
        net: &UNet3d<f64>,
        x: ArrayD<f64>,
        with_emb: bool,
    ) -> (ArrayD<f64>, Option<ArrayD<f64>>) {
        let tape = Tape::<f64>::no_grad();
        let params = net.bind(&tape);
        let xt = tape.leaf(x, false);
        let out = net.forward(&tape, &params, xt, with_emb).unwrap();
        (
            tape.value(out.probs).as_ref().clone(),
            out.embeddings.map(|e| tape.value(e).as_ref().clone()),
        )
    }

    #[test]
    fn output_shapes_match_config() {
        let cfg = NetworkConfig::default();
        let net = UNet3d::<f32>::new(cfg.clone(), 0).unwrap();
        let tape = Tape::<f32>::no_grad();
        let params = net.bind(&tape);
        let x = tape.leaf(ArrayD::zeros(vec![1, 1, 16, 16, 16]), false);
        let out = net.forward(&tape, &params, x, true).unwrap();
        assert_eq!(tape.shape(out.logits), vec![1, 3, 16, 16, 16]);
        assert_eq!(tape.shape(out.probs), vec![1, 3, 16, 16, 16]);
        let emb = out.embeddings.unwrap();
        assert_eq!(tape.shape(emb), vec![1, 64, 4, 4, 4]);
        assert_eq!(out.embedding_stride, 4);
    }

    #[test]
    fn probabilities_normalise_and_embeddings_unit_norm() {
        let net = UNet3d::<f64>::new(tiny_cfg(), 3).unwrap();
        let x = ArrayD::from_shape_fn(vec![2, 1, 8, 8, 8], |ix| {
            ((ix[2] * 64 + ix[3] * 8 + ix[4]) as f64 * 0.37).sin()
        });
        let (probs, emb) = forward_once(&net, x, true);
        let emb = emb.unwrap();
        for ni in 0..2 {
            for z in 0..8 {
                for y in 0..8 {
                    for xx in 0..8 {
                        let s: f64 = (0..3).map(|c| probs[[ni, c, z, y, xx]]).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                    }
                }
            }
            for z in 0..4 {
                let n: f64 = (0..8).map(|c| emb[[ni, c, z, 0, 0]].powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn indivisible_input_names_the_axis() {
        let net = UNet3d::<f32>::new(NetworkConfig::default(), 0).unwrap();
        let tape = Tape::<f32>::no_grad();
        let params = net.bind(&tape);
        let x = tape.leaf(ArrayD::zeros(vec![1, 1, 90, 96, 96]), false);
        match net.forward(&tape, &params, x, false) {
            Err(Error::Shape(msg)) => {
                assert!(msg.contains("axis 0"), "message should name axis 0: {msg}");
                assert!(msg.contains("90"));
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    /// Padding introduces boundary effects, so constancy is only expected on
    /// interior voxels whose receptive cone never touches an edge. The crop
    /// margin (28) exceeds the depth-3 receptive radius (~22).
    #[test]
    fn constant_input_gives_constant_output_on_interior() {
        let net = UNet3d::<f64>::new(tiny_cfg(), 11).unwrap();
        let x = ArrayD::from_elem(vec![1, 1, 64, 64, 64], 0.4);
        let (probs, _) = forward_once(&net, x, false);
        let first = [
            probs[[0, 0, 32, 32, 32]],
            probs[[0, 1, 32, 32, 32]],
            probs[[0, 2, 32, 32, 32]],
        ];
        for z in 28..36 {
            for y in 28..36 {
                for xx in 28..36 {
                    for c in 0..3 {
                        assert!(
                            (probs[[0, c, z, y, xx]] - first[c]).abs() < 1e-9,
                            "positional leakage at ({z},{y},{xx})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn batch_entries_are_independent() {
        let net = UNet3d::<f64>::new(tiny_cfg(), 5).unwrap();
        let one = ArrayD::from_shape_fn(vec![1, 1, 8, 8, 8], |ix| (ix[2] + ix[3] * 2 + ix[4]) as f64 * 0.1);
        let mut two = ArrayD::zeros(vec![2, 1, 8, 8, 8]);
        for ix in 0..2 {
            two.index_axis_mut(ndarray::Axis(0), ix).assign(&one.index_axis(ndarray::Axis(0), 0));
        }
        let (p1, _) = forward_once(&net, one, false);
        let (p2, _) = forward_once(&net, two, false);
        for c in 0..3 {
            for z in 0..8 {
                assert!((p2[[0, c, z, 0, 0]] - p1[[0, c, z, 0, 0]]).abs() < 1e-12);
                assert!((p2[[1, c, z, 0, 0]] - p1[[0, c, z, 0, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [tiny_cfg(), NetworkConfig::default()] {
            let net = UNet3d::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(net.params.param_count(), UNet3d::<f32>::expected_param_count(&cfg));
        }
    }

    #[test]
    fn default_param_count_golden() {
        // enc 1976+10432+41600+166144, dec 110720+27712+6944, final 27, head 3200
        let net = UNet3d::<f32>::new(NetworkConfig::default(), 0).unwrap();
        assert_eq!(net.params.param_count(), 368_755);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let net = UNet3d::<f32>::new(tiny_cfg(), 7).unwrap();
        let meta = CheckpointMeta { step: 42, epoch: 3, seed: 7 };
        save_checkpoint(&p, &net, &meta, None).unwrap();
        let (restored, meta2, opt) = load_checkpoint::<f32>(&p, Some(&tiny_cfg())).unwrap();
        assert_eq!(meta2, meta);
        assert!(opt.is_none());
        assert_eq!(restored.params.content_hash(), net.params.content_hash());
    }

    #[test]
    fn checkpoint_config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let net = UNet3d::<f32>::new(tiny_cfg(), 7).unwrap();
        save_checkpoint(&p, &net, &CheckpointMeta { step: 0, epoch: 0, seed: 7 }, None).unwrap();
        let other = NetworkConfig { base_channels: 4, ..tiny_cfg() };
        assert!(matches!(
            load_checkpoint::<f32>(&p, Some(&other)),
            Err(Error::Checkpoint(_))
        ));
    }
}
