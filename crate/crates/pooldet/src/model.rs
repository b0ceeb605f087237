//! Toy detection head: a fixed patch descriptor feeding two parallel MLP
//! stacks shared across all locations and levels, with manual backprop and
//! momentum SGD.
//!
//! The descriptor stands in for a learned backbone. Each location reads a
//! square intensity window centered on its image point, block-averaged to a
//! fixed 8x8 grid, plus its two normalized image coordinates. The window side
//! is `window_strides` times the level stride so that a positive feature can
//! see the box boundaries it must regress; see the README for the sizing
//! rationale.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{GridSpec, PyramidSpec};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::num::{logit, sigmoid, softplus, softplus_inv};
use crate::tensor::{LevelTensor, PyramidTensor};

/// Side of the block-averaged descriptor patch.
pub const DESCRIPTOR_GRID: usize = 8;
/// Patch cells plus two normalized-coordinate channels.
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID + 2;

/// Initial classification probability; the final bias is set so that a fresh
/// head predicts roughly this sigmoid everywhere.
pub const CLASSIFICATION_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Width of each hidden layer.
    pub hidden: usize,
    /// Number of hidden layers per stack.
    pub depth: usize,
    /// Descriptor window side, in multiples of the level stride.
    pub window_strides: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            hidden: 64,
            depth: 2,
            window_strides: 6.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::InvalidParameter(
                "num_classes, hidden and depth must all be positive".into(),
            ));
        }
        if self.window_strides <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "window_strides must be positive, got {}",
                self.window_strides
            )));
        }
        Ok(())
    }
}

/// Fully-connected layer, weights stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *out_v = acc;
        }
    }
}

/// One MLP stack: `depth` hidden ReLU layers followed by an affine output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn zeros(in_dim: usize, hidden: usize, depth: usize, out_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = in_dim;
        for _ in 0..depth {
            layers.push(Dense::zeros(prev, hidden));
            prev = hidden;
        }
        layers.push(Dense::zeros(prev, out_dim));
        Self { layers }
    }

    /// Forward pass keeping every post-ReLU activation (input first); the
    /// returned vector is the final affine output.
    fn forward_cached(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) -> Vec<f64> {
        acts.clear();
        acts.push(x.to_vec());
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim];
            layer.forward_into(acts.last().unwrap(), &mut out);
            if idx + 1 < self.layers.len() {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                acts.push(out);
            } else {
                return out;
            }
        }
        unreachable!("mlp has at least one layer")
    }

    /// Accumulates parameter gradients for one location given the upstream
    /// gradient on the affine output. `acts` must come from `forward_cached`.
    fn backward_accumulate(&self, acts: &[Vec<f64>], upstream: &[f64], grads: &mut Mlp) {
        let mut delta = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[idx];
            let glayer = &mut grads.layers[idx];
            for (o, &d) in delta.iter().enumerate() {
                glayer.b[o] += d;
                let row = &mut glayer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (wi, xi) in row.iter_mut().zip(input) {
                    *wi += d * xi;
                }
            }
            if idx == 0 {
                break;
            }
            let mut next = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (nx, wi) in next.iter_mut().zip(row) {
                    *nx += d * wi;
                }
            }
            // ReLU gate: activation 0 means the unit was off.
            for (nx, &a) in next.iter_mut().zip(input) {
                if a <= 0.0 {
                    *nx = 0.0;
                }
            }
            delta = next;
        }
    }
}

/// Weights of the shared per-location detection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyHeadParams {
    pub config: ModelConfig,
    pub cls: Mlp,
    pub reg: Mlp,
}

impl ToyHeadParams {
    /// Fresh initialization: He-uniform hidden layers, small final weights,
    /// classification bias at the sigmoid prior and regression bias at one
    /// stride of decoded side distance.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cls = Mlp::zeros(DESCRIPTOR_LEN, config.hidden, config.depth, config.num_classes);
        let mut reg = Mlp::zeros(DESCRIPTOR_LEN, config.hidden, config.depth, 4);
        for mlp in [&mut cls, &mut reg] {
            let last = mlp.layers.len() - 1;
            for (idx, layer) in mlp.layers.iter_mut().enumerate() {
                let bound = if idx == last {
                    0.01
                } else {
                    (6.0 / layer.in_dim as f64).sqrt()
                };
                for w in &mut layer.w {
                    *w = rng.gen_range(-bound..bound);
                }
            }
        }
        let cls_last = cls.layers.last_mut().unwrap();
        cls_last.b.fill(logit(CLASSIFICATION_PRIOR));
        let reg_last = reg.layers.last_mut().unwrap();
        reg_last.b.fill(softplus_inv(1.0));
        Ok(Self {
            config: *config,
            cls,
            reg,
        })
    }

    /// Zeroed gradients shaped like these parameters.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for mlp in [&mut out.cls, &mut out.reg] {
            for layer in &mut mlp.layers {
                layer.w.fill(0.0);
                layer.b.fill(0.0);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.flatten().len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for mlp in [&self.cls, &self.reg] {
            for layer in &mlp.layers {
                out.extend_from_slice(&layer.w);
                out.extend_from_slice(&layer.b);
            }
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for mlp in [&mut self.cls, &mut self.reg] {
            for layer in &mut mlp.layers {
                layer.w.copy_from_slice(&flat[pos..pos + layer.w.len()]);
                pos += layer.w.len();
                layer.b.copy_from_slice(&flat[pos..pos + layer.b.len()]);
                pos += layer.b.len();
            }
        }
        assert_eq!(pos, flat.len());
    }
}

/// Block-averaged window descriptor for one location.
///
/// The window is `window_strides * stride` pixels wide, centered on the
/// location's image point; each of the 8x8 cells averages the pixels whose
/// centers fall inside it, with out-of-image pixels reading 0. The last two
/// channels are the location center normalized by image width and height.
pub fn extract_descriptor(
    image: &GrayImage,
    grid: &GridSpec,
    i: usize,
    j: usize,
    window_strides: f64,
) -> Vec<f64> {
    let center = grid.center(i, j);
    let window = window_strides * grid.stride;
    let cell = window / DESCRIPTOR_GRID as f64;
    let left = center.x - 0.5 * window;
    let top = center.y - 0.5 * window;

    let mut out = Vec::with_capacity(DESCRIPTOR_LEN);
    for v in 0..DESCRIPTOR_GRID {
        let y0 = top + v as f64 * cell;
        let y1 = y0 + cell;
        // pixel p covers [p, p+1); include p when its center is inside [y0, y1)
        let py0 = (y0 - 0.5).ceil() as isize;
        let py1 = ((y1 - 0.5).ceil() as isize).max(py0 + 1);
        for u in 0..DESCRIPTOR_GRID {
            let x0 = left + u as f64 * cell;
            let x1 = x0 + cell;
            let px0 = (x0 - 0.5).ceil() as isize;
            let px1 = ((x1 - 0.5).ceil() as isize).max(px0 + 1);
            let mut acc = 0.0;
            for py in py0..py1 {
                for px in px0..px1 {
                    acc += image.get(px, py);
                }
            }
            out.push(acc / ((py1 - py0) * (px1 - px0)) as f64);
        }
    }
    out.push(center.x / image.width as f64);
    out.push(center.y / image.height as f64);
    out
}

/// Descriptors for every location of every level, stored as a pyramid tensor
/// with `DESCRIPTOR_LEN` channels. They depend only on the image and geometry,
/// so training caches them across epochs.
pub fn compute_descriptors(
    image: &GrayImage,
    pyramid: &PyramidSpec,
    window_strides: f64,
) -> PyramidTensor {
    let levels = pyramid
        .levels
        .iter()
        .map(|grid| {
            let mut lt = LevelTensor::zeros(grid.height, grid.width, DESCRIPTOR_LEN);
            for i in 0..grid.height {
                for j in 0..grid.width {
                    let d = extract_descriptor(image, grid, i, j, window_strides);
                    let base = lt.idx(i, j, 0);
                    lt.data[base..base + DESCRIPTOR_LEN].copy_from_slice(&d);
                }
            }
            lt
        })
        .collect();
    PyramidTensor { levels }
}

/// Runs the head over precomputed descriptors.
///
/// Returns per level an `H x W x C` classification logit map and an
/// `H x W x 4` regression map; regression outputs go through softplus so
/// decoded side distances are positive.
pub fn forward_descriptors(
    params: &ToyHeadParams,
    descriptors: &PyramidTensor,
) -> (PyramidTensor, PyramidTensor) {
    let num_classes = params.config.num_classes;
    let mut cls_levels = Vec::with_capacity(descriptors.levels.len());
    let mut reg_levels = Vec::with_capacity(descriptors.levels.len());
    let mut acts = Vec::new();
    for dl in &descriptors.levels {
        let mut cls = LevelTensor::zeros(dl.height, dl.width, num_classes);
        let mut reg = LevelTensor::zeros(dl.height, dl.width, 4);
        for i in 0..dl.height {
            for j in 0..dl.width {
                let d = dl.at(i, j);
                let c_out = params.cls.forward_cached(d, &mut acts);
                let cbase = cls.idx(i, j, 0);
                cls.data[cbase..cbase + num_classes].copy_from_slice(&c_out);
                let r_out = params.reg.forward_cached(d, &mut acts);
                let rbase = reg.idx(i, j, 0);
                for (k, pre) in r_out.iter().enumerate() {
                    reg.data[rbase + k] = softplus(*pre);
                }
            }
        }
        cls_levels.push(cls);
        reg_levels.push(reg);
    }
    (
        PyramidTensor { levels: cls_levels },
        PyramidTensor { levels: reg_levels },
    )
}

/// Full forward pass from an image.
pub fn forward(
    params: &ToyHeadParams,
    image: &GrayImage,
    pyramid: &PyramidSpec,
) -> (PyramidTensor, PyramidTensor) {
    let descriptors = compute_descriptors(image, pyramid, params.config.window_strides);
    forward_descriptors(params, &descriptors)
}

/// Exact parameter gradients for upstream gradients shaped like the forward
/// outputs, summed over all locations and levels.
pub fn backward(
    params: &ToyHeadParams,
    descriptors: &PyramidTensor,
    upstream_cls: &PyramidTensor,
    upstream_reg: &PyramidTensor,
) -> Result<ToyHeadParams> {
    let shapes: Vec<(usize, usize)> = descriptors
        .levels
        .iter()
        .map(|l| (l.height, l.width))
        .collect();
    upstream_cls.check_shape(&shapes, params.config.num_classes, "upstream classification")?;
    upstream_reg.check_shape(&shapes, 4, "upstream regression")?;

    let mut grads = params.zeros_like();
    let mut acts = Vec::new();
    for (lvl, dl) in descriptors.levels.iter().enumerate() {
        let uc = &upstream_cls.levels[lvl];
        let ur = &upstream_reg.levels[lvl];
        for i in 0..dl.height {
            for j in 0..dl.width {
                let d = dl.at(i, j);
                let up_c = uc.at(i, j);
                if up_c.iter().any(|&v| v != 0.0) {
                    params.cls.forward_cached(d, &mut acts);
                    params.cls.backward_accumulate(&acts, up_c, &mut grads.cls);
                }
                let up_r = ur.at(i, j);
                if up_r.iter().any(|&v| v != 0.0) {
                    let pre = params.reg.forward_cached(d, &mut acts);
                    // chain through softplus on each regression output
                    let gated: Vec<f64> = up_r
                        .iter()
                        .zip(&pre)
                        .map(|(&u, &p)| u * sigmoid(p))
                        .collect();
                    params.reg.backward_accumulate(&acts, &gated, &mut grads.reg);
                }
            }
        }
    }
    Ok(grads)
}

/// SGD with momentum, weight decay and a milestone learning-rate schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub base_learning_rate: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    buffers: Vec<f64>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, milestones: Vec<usize>) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            base_learning_rate: learning_rate,
            learning_rate,
            momentum,
            weight_decay,
            milestones,
            buffers: Vec::new(),
        })
    }

    /// Applies the milestone schedule: lr = base * 0.1^(milestones passed).
    pub fn start_epoch(&mut self, epoch: usize) {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate = self.base_learning_rate * 0.1f64.powi(drops as i32);
    }
}

/// One optimizer step: buffer <- momentum * buffer + grad + wd * param;
/// param <- param - lr * buffer.
pub fn sgd_step(params: &mut ToyHeadParams, grads: &ToyHeadParams, state: &mut OptimState) {
    let flat_grads = grads.flatten();
    let mut flat = params.flatten();
    if state.buffers.is_empty() {
        state.buffers = vec![0.0; flat.len()];
    }
    assert_eq!(flat.len(), state.buffers.len(), "optimizer state shape");
    for ((p, g), buf) in flat.iter_mut().zip(&flat_grads).zip(&mut state.buffers) {
        *buf = state.momentum * *buf + g + state.weight_decay * *p;
        *p -= state.learning_rate * *buf;
    }
    params.assign_flat(&flat);
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    params: ToyHeadParams,
}

/// Writes a versioned checkpoint; floating-point values round-trip exactly.
pub fn save_checkpoint(path: &Path, params: &ToyHeadParams, config_hash: &str) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        params: params.clone(),
    };
    fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

/// Loads a checkpoint, verifying version and (when given) the config hash.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<ToyHeadParams> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if let Some(expect) = expected_hash {
        if ckpt.config_hash != expect {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was trained under config hash {} but the current config hashes to {expect}",
                ckpt.config_hash
            )));
        }
    }
    ckpt.params.config.validate()?;
    Ok(ckpt.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            hidden: 8,
            depth: 2,
            window_strides: 6.0,
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = GrayImage::new(w, h);
        for p in &mut img.pixels {
            *p = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn output_shapes_match_pyramid() {
        let pyramid = PyramidSpec::for_image(64, 48, 2, 4, 10.0).unwrap();
        let params = ToyHeadParams::init(&ModelConfig::default(), 0).unwrap();
        let (cls, reg) = forward(&params, &random_image(64, 48, 1), &pyramid);
        for (grid, (c, r)) in pyramid.levels.iter().zip(cls.levels.iter().zip(&reg.levels)) {
            assert_eq!((c.height, c.width, c.channels), (grid.height, grid.width, 3));
            assert_eq!((r.height, r.width, r.channels), (grid.height, grid.width, 4));
        }
    }

    #[test]
    fn fresh_init_sigmoids_near_prior() {
        let pyramid = PyramidSpec::for_image(128, 128, 2, 4, 10.0).unwrap();
        let params = ToyHeadParams::init(&ModelConfig::default(), 7).unwrap();
        let (cls, reg) = forward(&params, &random_image(128, 128, 2), &pyramid);
        for lvl in &cls.levels {
            for &x in &lvl.data {
                let p = sigmoid(x);
                assert!(p > 0.005 && p < 0.02, "initial sigmoid {p} outside (0.005, 0.02)");
            }
        }
        // regression outputs are positive by construction
        for lvl in &reg.levels {
            assert!(lvl.data.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn identical_descriptors_share_outputs() {
        let pyramid = PyramidSpec::for_image(64, 64, 3, 3, 10.0).unwrap();
        let params = ToyHeadParams::init(&small_config(), 3).unwrap();
        // Uniform image: every descriptor is equal except coordinate channels;
        // zero them out to make the sharing exact.
        let img = GrayImage {
            width: 64,
            height: 64,
            pixels: vec![0.25; 64 * 64],
        };
        let mut descr = compute_descriptors(&img, &pyramid, params.config.window_strides);
        let lt = &mut descr.levels[0];
        for i in 0..lt.height {
            for j in 0..lt.width {
                let base = lt.idx(i, j, DESCRIPTOR_GRID * DESCRIPTOR_GRID);
                lt.data[base] = 0.0;
                lt.data[base + 1] = 0.0;
            }
        }
        let (cls, _) = forward_descriptors(&params, &descr);
        let lt = &cls.levels[0];
        let first = lt.at(0, 0).to_vec();
        for i in 0..lt.height {
            for j in 0..lt.width {
                assert_eq!(lt.at(i, j), &first[..]);
            }
        }
    }

    #[test]
    fn black_image_descriptor_is_zero_plus_coords() {
        let pyramid = PyramidSpec::for_image(32, 32, 3, 3, 10.0).unwrap();
        let img = GrayImage::new(32, 32);
        let grid = pyramid.grid(3);
        let d = extract_descriptor(&img, grid, 1, 1, 6.0);
        assert!(d[..64].iter().all(|&v| v == 0.0));
        // center of a 4x4 grid cell (1,1) at stride 8 is (12, 12) in a 32 px image
        assert!((d[64] - 12.0 / 32.0).abs() < 1e-12);
        assert!((d[65] - 12.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn center_location_coordinate_channels() {
        // cell (2,2) of a 5x5 grid at stride 16 has center (40, 40) = middle of 80px
        let pyramid = PyramidSpec::for_image(80, 80, 4, 4, 10.0).unwrap();
        let img = GrayImage::new(80, 80);
        let d = extract_descriptor(&img, pyramid.grid(4), 2, 2, 6.0);
        assert_eq!(d[64], 0.5);
        assert_eq!(d[65], 0.5);
    }

    #[test]
    fn descriptor_shifts_with_image() {
        // Shifting the image right by one stride makes location (i, j) see the
        // patch that (i, j-1) saw on the original (patch cells only; the
        // coordinate channels encode the location, not the image).
        let stride = 8usize;
        let img = random_image(64, 64, 9);
        let mut shifted = GrayImage::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                shifted.set(x, y, img.get(x as isize - stride as isize, y as isize));
            }
        }
        let pyramid = PyramidSpec::for_image(64, 64, 3, 3, 10.0).unwrap();
        let grid = pyramid.grid(3);
        for i in 0..grid.height {
            for j in 1..grid.width {
                let a = extract_descriptor(&shifted, grid, i, j, 6.0);
                let b = extract_descriptor(&img, grid, i, j - 1, 6.0);
                assert_eq!(a[..64], b[..64], "at ({i},{j})");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let pyramid = PyramidSpec::for_image(32, 32, 3, 4, 10.0).unwrap();
        let params = ToyHeadParams::init(&small_config(), 5).unwrap();
        let descr = compute_descriptors(&random_image(32, 32, 6), &pyramid, 6.0);
        let shapes = pyramid.shapes();
        let up_c = PyramidTensor::zeros_like(&shapes, 2);
        let up_r = PyramidTensor::zeros_like(&shapes, 4);
        let grads = backward(&params, &descr, &up_c, &up_r).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let pyramid = PyramidSpec::for_image(16, 16, 3, 3, 10.0).unwrap();
        let config = small_config();
        let mut params = ToyHeadParams::init(&config, 11).unwrap();
        // Spread parameters away from the tiny final-layer init so logits
        // cover a healthy range for the finite-difference probe.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut flat = params.flatten();
        for v in &mut flat {
            *v += rng.gen_range(-0.3..0.3);
        }
        params.assign_flat(&flat);

        let img = random_image(16, 16, 13);
        let descr = compute_descriptors(&img, &pyramid, config.window_strides);
        let shapes = pyramid.shapes();
        // random linear functional of the outputs as the loss
        let mut up_c = PyramidTensor::zeros_like(&shapes, 2);
        let mut up_r = PyramidTensor::zeros_like(&shapes, 4);
        for t in [&mut up_c, &mut up_r] {
            for lvl in &mut t.levels {
                for v in &mut lvl.data {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let analytic = backward(&params, &descr, &up_c, &up_r).unwrap().flatten();

        let loss = |flat: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(flat);
            let (cls, reg) = forward_descriptors(&p, &descr);
            let mut acc = 0.0;
            for (a, b) in cls.levels.iter().zip(&up_c.levels) {
                for (x, u) in a.data.iter().zip(&b.data) {
                    acc += x * u;
                }
            }
            for (a, b) in reg.levels.iter().zip(&up_r.levels) {
                for (x, u) in a.data.iter().zip(&b.data) {
                    acc += x * u;
                }
            }
            acc
        };
        let mut flat = params.flatten();
        let worst = check_gradient(&mut flat, &analytic, loss, 1e-5, 1e-6).unwrap();
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_are_additive_over_images() {
        let pyramid = PyramidSpec::for_image(32, 32, 3, 3, 10.0).unwrap();
        let params = ToyHeadParams::init(&small_config(), 17).unwrap();
        let shapes = pyramid.shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut up_c = PyramidTensor::zeros_like(&shapes, 2);
        let mut up_r = PyramidTensor::zeros_like(&shapes, 4);
        for t in [&mut up_c, &mut up_r] {
            for lvl in &mut t.levels {
                for v in &mut lvl.data {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let d1 = compute_descriptors(&random_image(32, 32, 19), &pyramid, 6.0);
        let d2 = compute_descriptors(&random_image(32, 32, 20), &pyramid, 6.0);
        let g1 = backward(&params, &d1, &up_c, &up_r).unwrap().flatten();
        let g2 = backward(&params, &d2, &up_c, &up_r).unwrap().flatten();
        // summed-loss gradient = sum of per-image gradients (just add them)
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        for ((a, b), s) in g1.iter().zip(&g2).zip(&summed) {
            assert_eq!(a + b, *s);
        }
    }

    #[test]
    fn sgd_step_identities() {
        let config = small_config();
        let params0 = ToyHeadParams::init(&config, 21).unwrap();

        // zero grad, zero buffer, zero weight decay: unchanged
        let mut p = params0.clone();
        let zeros = p.zeros_like();
        let mut state = OptimState::new(0.1, 0.9, 0.0, vec![]).unwrap();
        sgd_step(&mut p, &zeros, &mut state);
        assert_eq!(p.flatten(), params0.flatten());

        // momentum 0, wd 0: plain gradient descent
        let mut p = params0.clone();
        let mut grads = p.zeros_like();
        let flat_ones = vec![1.0; p.num_parameters()];
        grads.assign_flat(&flat_ones);
        let mut state = OptimState::new(0.5, 0.0, 0.0, vec![]).unwrap();
        sgd_step(&mut p, &grads, &mut state);
        for (after, before) in p.flatten().iter().zip(params0.flatten()) {
            assert!((after - (before - 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn milestones_drop_learning_rate_tenfold() {
        let mut state = OptimState::new(0.02, 0.9, 1e-4, vec![8, 11]).unwrap();
        state.start_epoch(0);
        assert_eq!(state.learning_rate, 0.02);
        state.start_epoch(8);
        assert!((state.learning_rate - 0.002).abs() < 1e-15);
        state.start_epoch(11);
        assert!((state.learning_rate - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyHeadParams::init(&ModelConfig::default(), 42).unwrap();
        let b = ToyHeadParams::init(&ModelConfig::default(), 42).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = ToyHeadParams::init(&ModelConfig::default(), 43).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt.json");
        let mut params = ToyHeadParams::init(&small_config(), 31).unwrap();
        // adversarial values that expose lossy float formatting
        let mut flat = params.flatten();
        flat[0] = 0.1 + 0.2;
        flat[1] = 1.0e-300;
        flat[2] = std::f64::consts::PI;
        params.assign_flat(&flat);
        save_checkpoint(&path, &params, "deadbeef").unwrap();
        let loaded = load_checkpoint(&path, Some("deadbeef")).unwrap();
        assert_eq!(loaded.flatten(), params.flatten());
        assert!(load_checkpoint(&path, Some("othercfg")).is_err());
    }
}
