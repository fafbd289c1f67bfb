//! Per-view CNN backbone, view fusion and descriptor head.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SpatialIndex, Vec3};
use crate::render::{
    default_up, local_patch, render_views_on_tape, ForwardMode, RenderConfig, SoftRenderConfig, ViewpointInit,
    ViewpointSet,
};
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

/// (out channels, stride) of the six backbone layers; all 3x3, padding 1.
pub const BACKBONE_LAYERS: [(usize, usize); 6] = [(32, 2), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1)];
pub const FEATURE_CHANNELS: usize = 128;
const FUSION_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    Max,
    Avg,
    #[default]
    Soft,
}

impl FusionMode {
    fn code(self) -> f64 {
        match self {
            FusionMode::Max => 0.0,
            FusionMode::Avg => 1.0,
            FusionMode::Soft => 2.0,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(FusionMode::Max),
            1 => Ok(FusionMode::Avg),
            2 => Ok(FusionMode::Soft),
            _ => Err(Error::Config(format!("unknown fusion mode code {code}"))),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(FusionMode::Max),
            "avg" => Ok(FusionMode::Avg),
            "soft" => Ok(FusionMode::Soft),
            _ => Err(Error::Config(format!("fusion mode must be max, avg or soft, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_views: usize,
    pub descriptor_dim: usize,
    pub fusion: FusionMode,
    pub viewpoint_init: ViewpointInit,
    pub render: RenderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_views: 8,
            descriptor_dim: 32,
            fusion: FusionMode::Soft,
            viewpoint_init: ViewpointInit::Random,
            render: RenderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Spatial side of the backbone output for the configured patch size.
    pub fn feature_size(&self) -> usize {
        BACKBONE_LAYERS
            .iter()
            .fold(self.render.image_size, |s, &(_, stride)| (s - 1) / stride + 1)
    }

    pub fn head_inputs(&self) -> usize {
        let f = self.feature_size();
        FEATURE_CHANNELS * f * f
    }
}

/// Variables of one bound model on a tape, in parameter order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn conv(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    pub fn fusion_down(&self) -> (Var, Var) {
        (self.vars[12], self.vars[13])
    }

    pub fn fusion_up(&self) -> (Var, Var) {
        (self.vars[14], self.vars[15])
    }

    pub fn head(&self) -> (Var, Var) {
        (self.vars[16], self.vars[17])
    }

    pub fn viewpoints(&self) -> [Var; 3] {
        [self.vars[18], self.vars[19], self.vars[20]]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// All learnable tensors: backbone, fusion sub-network, head and viewpoints.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub up: Vec3,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn param_names() -> Vec<String> {
    let mut names = Vec::new();
    for k in 1..=6 {
        names.push(format!("backbone.conv{k}.w"));
        names.push(format!("backbone.conv{k}.b"));
    }
    for n in [
        "fusion.down.w",
        "fusion.down.b",
        "fusion.up.w",
        "fusion.up.b",
        "head.w",
        "head.b",
        "viewpoints.theta",
        "viewpoints.phi",
        "viewpoints.rho",
    ] {
        names.push(n.to_string());
    }
    names
}

fn param_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    let mut c_in = 1;
    for &(c_out, _) in &BACKBONE_LAYERS {
        shapes.push(vec![c_out, c_in, 3, 3]);
        shapes.push(vec![c_out]);
        c_in = c_out;
    }
    shapes.push(vec![FUSION_HIDDEN, FEATURE_CHANNELS, 3, 3]);
    shapes.push(vec![FUSION_HIDDEN]);
    // Transposed convolution weights are laid out [C_in, C_out, 3, 3].
    shapes.push(vec![FUSION_HIDDEN, FEATURE_CHANNELS, 3, 3]);
    shapes.push(vec![FEATURE_CHANNELS]);
    shapes.push(vec![config.descriptor_dim, config.head_inputs()]);
    shapes.push(vec![config.descriptor_dim]);
    for _ in 0..3 {
        shapes.push(vec![config.n_views]);
    }
    shapes
}

impl Model {
    /// Fresh weights (He-normal, zero biases) and initial viewpoints from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.n_views == 0 || config.descriptor_dim == 0 {
            return Err(Error::Config("n_views and descriptor_dim must be positive".into()));
        }
        if config.render.image_size < 8 {
            return Err(Error::Config(format!(
                "image size must be at least 8, got {}",
                config.render.image_size
            )));
        }
        config.render.soft.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(&config);
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes[..18].iter().enumerate() {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                // Fan-in of a transposed convolution is its input channels x 9.
                let fan_in = match i {
                    14 => shape[0] * 9,
                    _ => shape[1..].iter().product(),
                };
                Tensor::he_normal(shape, fan_in, &mut rng)
            };
            params.push(t.with_requires_grad(true));
        }
        let vp = ViewpointSet::init(config.viewpoint_init, config.n_views, &mut rng)?;
        for v in [vp.theta, vp.phi, vp.rho] {
            params.push(Tensor::from_slice(&v).with_requires_grad(true));
        }
        Ok(Self {
            config,
            up: default_up(),
            names: param_names(),
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn viewpoints(&self) -> ViewpointSet {
        ViewpointSet {
            theta: self.params[18].data().to_vec(),
            phi: self.params[19].data().to_vec(),
            rho: self.params[20].data().to_vec(),
            up: self.up,
        }
    }

    /// Records every parameter as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        ModelVars {
            vars: self.params.iter().map(|p| tape.leaf(p)).collect(),
        }
    }

    /// Local patch of `keypoint` in its LRF, ready for rendering.
    pub fn prepare(&self, cloud: &PointCloud, index: &SpatialIndex, keypoint: usize) -> Result<Arc<PointCloud>> {
        local_patch(cloud, index, keypoint, self.up, self.config.render.crop_radius).map(Arc::new)
    }

    /// Render, extract, fuse and embed one keypoint; returns the `[d]` descriptor.
    pub fn describe_on_tape<'a>(&self, tape: &mut Tape<'a>, vars: &ModelVars, local: Arc<PointCloud>) -> Result<Var> {
        let patches = render_views_on_tape(tape, vars.viewpoints(), self.up, local, &self.config.render)?;
        let feats = patches
            .into_iter()
            .map(|p| extract_view_features(tape, vars, p))
            .collect::<Result<Vec<_>>>()?;
        let fused = match self.config.fusion {
            FusionMode::Max => max_view_pool(tape, &feats)?,
            FusionMode::Avg => avg_view_pool(tape, &feats)?,
            FusionMode::Soft => soft_view_pool(tape, vars, &feats)?,
        };
        descriptor_head(tape, vars, fused)
    }

    pub fn describe_keypoint(&self, cloud: &PointCloud, index: &SpatialIndex, keypoint: usize) -> Result<Vec<f64>> {
        let local = self.prepare(cloud, index, keypoint)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let d = self.describe_on_tape(&mut tape, &vars, local)?;
        Ok(tape.value(d).to_vec())
    }

    /// Descriptors for many keypoints, in input order.
    pub fn describe_keypoints(
        &self,
        cloud: &PointCloud,
        index: &SpatialIndex,
        keypoints: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        crate::par::map_collect(keypoints, |_, &k| self.describe_keypoint(cloud, index, k))
            .into_iter()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.config;
        let meta_up = Tensor::from_slice(self.up.as_slice());
        let meta_model = Tensor::from_slice(&[
            cfg.n_views as f64,
            cfg.descriptor_dim as f64,
            cfg.fusion.code(),
            cfg.render.image_size as f64,
        ]);
        let meta_render = Tensor::from_slice(&[
            cfg.render.soft.sigma,
            cfg.render.soft.gamma,
            cfg.render.soft.background_eps,
            cfg.render.crop_radius,
        ]);
        let mut entries: Vec<(&str, &Tensor)> = self.names.iter().map(String::as_str).zip(&self.params).collect();
        entries.push(("meta.up", &meta_up));
        entries.push(("meta.model", &meta_model));
        entries.push(("meta.render", &meta_render));
        save_checkpoint(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let bad = |msg: String| Error::format(path, msg);
        let model_meta = find("meta.model").ok_or_else(|| bad("missing meta.model".into()))?;
        let render_meta = find("meta.render").ok_or_else(|| bad("missing meta.render".into()))?;
        let up_meta = find("meta.up").ok_or_else(|| bad("missing meta.up".into()))?;
        let (m, r, u) = (model_meta.data(), render_meta.data(), up_meta.data());
        if m.len() != 4 || r.len() != 4 || u.len() != 3 {
            return Err(bad("malformed meta tensors".into()));
        }
        let config = ModelConfig {
            n_views: m[0] as usize,
            descriptor_dim: m[1] as usize,
            fusion: FusionMode::from_code(m[2])?,
            viewpoint_init: ViewpointInit::Random,
            render: RenderConfig {
                soft: SoftRenderConfig {
                    sigma: r[0],
                    gamma: r[1],
                    background_eps: r[2],
                },
                crop_radius: r[3],
                image_size: m[3] as usize,
                forward: ForwardMode::Hard,
            },
        };
        let mut model = Model::new(config, 0)?;
        model.up = Vec3::new(u[0], u[1], u[2]).normalize();
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = find(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

/// Six conv / instance-norm / ReLU layers: `[1, S, S] -> [128, S/8, S/8]`.
pub fn extract_view_features(tape: &mut Tape<'_>, vars: &ModelVars, patch: Var) -> Result<Var> {
    let shape = tape.shape(patch);
    if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
        return Err(Error::shape(format!("backbone expects a [1, S, S] patch, got {shape:?}")));
    }
    let mut x = patch;
    for (layer, &(_, stride)) in BACKBONE_LAYERS.iter().enumerate() {
        let (w, b) = vars.conv(layer);
        x = tape.conv2d(x, w, b, stride, 1)?;
        x = tape.instance_norm(x, INSTANCE_NORM_EPS)?;
        x = tape.relu(x);
    }
    Ok(x)
}

pub fn max_view_pool(tape: &mut Tape<'_>, features: &[Var]) -> Result<Var> {
    let stacked = tape.stack(features)?;
    tape.max_axis0(stacked)
}

pub fn avg_view_pool(tape: &mut Tape<'_>, features: &[Var]) -> Result<Var> {
    let stacked = tape.stack(features)?;
    tape.mean_axis0(stacked)
}

/// Attention logits per view from the down/up sub-network, softmax across
/// views at every location, then the weighted sum.
pub fn soft_view_pool(tape: &mut Tape<'_>, vars: &ModelVars, features: &[Var]) -> Result<Var> {
    let stacked = tape.stack(features)?;
    let weights = soft_view_weights(tape, vars, features)?;
    let weighted = tape.mul(weights, stacked)?;
    tape.sum_axis0(weighted)
}

/// Per-location view weights `[V, C, H, W]` used by [`soft_view_pool`].
pub fn soft_view_weights(tape: &mut Tape<'_>, vars: &ModelVars, features: &[Var]) -> Result<Var> {
    let (dw, db) = vars.fusion_down();
    let (uw, ub) = vars.fusion_up();
    let logits = features
        .iter()
        .map(|&f| {
            let side = tape.shape(f).get(1).copied().unwrap_or(0);
            let h = tape.conv2d(f, dw, db, 2, 1)?;
            let h = tape.relu(h);
            tape.conv_transpose2d(h, uw, ub, 2, 1, 1 - side % 2)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&logits)?;
    tape.softmax(stacked)
}

/// Flatten (channel, row, column), linear map to `d`, unit-normalize.
pub fn descriptor_head(tape: &mut Tape<'_>, vars: &ModelVars, fused: Var) -> Result<Var> {
    let (w, b) = vars.head();
    let y = tape.linear(fused, w, b)?;
    Ok(tape.l2_normalize(y, L2_EPS))
}
