//! Quine architectures, the parameter coordinate system, fixed random
//! projections and the forward pass.
//!
//! Both variants are bias-free MLPs:
//!
//! ```text
//! h0 = selu(embed)            embed = coordinate row (|| image_proj · image)
//! h1 = selu(W1 · h0)
//! h2 = selu(W2 · h1)
//! prediction = w_out · h2     (linear head)
//! logits     = W_aux · h2     (auxiliary variant only)
//! ```
//!
//! Trainable parameters are laid out flat as `W1 | W2 | w_out | W_aux`, each
//! block row-major. The fixed projections are never part of that vector.

use serde::{Deserialize, Serialize};

use crate::error::{QuineError, Result};
use crate::numeric::{axpy, dot, he_std, selu, transpose, DenseMatrix, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Auxiliary,
}

/// How a coordinate is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// One-hot coordinate through the fixed projection (a row lookup).
    OneHot,
    /// Ablation: the normalised scalar `c / (n - 1) - 0.5` times a fixed column.
    Scalar,
}

/// Default standard deviation of the coordinate projection entries.
pub const DEFAULT_COORD_PROJ_STD: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub coord_embed_dim: usize,
    pub image_embed_dim: usize,
    pub image_dim: usize,
    pub n_classes: usize,
    pub encoding: Encoding,
    /// Standard deviation of the i.i.d. Gaussian coordinate projection.
    pub coord_proj_std: f64,
}

impl NetworkSpec {
    /// The 20,100-parameter vanilla quine.
    pub fn vanilla() -> Self {
        Self::vanilla_with(100, 100)
    }

    /// The 21,100-parameter MNIST auxiliary quine.
    pub fn auxiliary() -> Self {
        Self::auxiliary_with(50, 50, 100, 784, 10)
    }

    pub fn vanilla_with(embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            variant: Variant::Vanilla,
            embed_dim,
            hidden_dim,
            coord_embed_dim: embed_dim,
            image_embed_dim: 0,
            image_dim: 0,
            n_classes: 0,
            encoding: Encoding::OneHot,
            coord_proj_std: DEFAULT_COORD_PROJ_STD,
        }
    }

    pub fn auxiliary_with(
        coord_embed_dim: usize,
        image_embed_dim: usize,
        hidden_dim: usize,
        image_dim: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            variant: Variant::Auxiliary,
            embed_dim: coord_embed_dim + image_embed_dim,
            hidden_dim,
            coord_embed_dim,
            image_embed_dim,
            image_dim,
            n_classes,
            encoding: Encoding::OneHot,
            coord_proj_std: DEFAULT_COORD_PROJ_STD,
        }
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn with_coord_proj_std(mut self, std: f64) -> Self {
        self.coord_proj_std = std;
        self
    }

    pub fn is_auxiliary(&self) -> bool {
        self.variant == Variant::Auxiliary
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QuineError::InvalidArgument(msg));
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.coord_embed_dim == 0 {
            return bad("network dimensions must be positive".into());
        }
        if self.coord_embed_dim + self.image_embed_dim != self.embed_dim {
            return bad(format!(
                "coord_embed_dim ({}) + image_embed_dim ({}) must equal embed_dim ({})",
                self.coord_embed_dim, self.image_embed_dim, self.embed_dim
            ));
        }
        if !(self.coord_proj_std.is_finite() && self.coord_proj_std > 0.0) {
            return bad("coord_proj_std must be positive and finite".into());
        }
        match self.variant {
            Variant::Vanilla => {
                if self.image_embed_dim != 0 || self.image_dim != 0 || self.n_classes != 0 {
                    return bad("vanilla quines take no auxiliary input or output".into());
                }
            }
            Variant::Auxiliary => {
                if self.image_embed_dim == 0 || self.image_dim == 0 || self.n_classes < 2 {
                    return bad("auxiliary quines need an image input and at least two classes".into());
                }
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        param_count(self)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Number of trainable parameters. There are no bias terms.
pub fn param_count(spec: &NetworkSpec) -> usize {
    let h = spec.hidden_dim;
    let aux = match spec.variant {
        Variant::Vanilla => 0,
        Variant::Auxiliary => spec.n_classes * h,
    };
    h * spec.embed_dim + h * h + h + aux
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    W1,
    W2,
    WOut,
    WAux,
}

impl Layer {
    pub fn name(self) -> &'static str {
        match self {
            Layer::W1 => "w1",
            Layer::W2 => "w2",
            Layer::WOut => "w_out",
            Layer::WAux => "w_aux",
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = QuineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w1" => Ok(Layer::W1),
            "w2" => Ok(Layer::W2),
            "w_out" => Ok(Layer::WOut),
            "w_aux" => Ok(Layer::WAux),
            other => Err(QuineError::InvalidArgument(format!("unknown layer '{other}'"))),
        }
    }
}

/// Where each weight block lives inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub layer: Layer,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Fan-in used for initialisation: the block's input width.
    pub fn fan_in(&self) -> usize {
        match self.layer {
            Layer::WOut => self.rows,
            _ => self.cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<Block>,
    total: usize,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let h = spec.hidden_dim;
        let mut shapes = vec![(Layer::W1, h, spec.embed_dim), (Layer::W2, h, h), (Layer::WOut, h, 1)];
        if spec.is_auxiliary() {
            shapes.push((Layer::WAux, spec.n_classes, h));
        }
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(layer, rows, cols)| {
                let b = Block { layer, offset, rows, cols };
                offset += rows * cols;
                b
            })
            .collect();
        Self { blocks, total: offset }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, layer: Layer) -> Option<Block> {
        self.blocks.iter().copied().find(|b| b.layer == layer)
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Index of one trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coordinate(pub usize);

impl Coordinate {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps a coordinate to `(layer, row, col)`.
pub fn locate(c: Coordinate, spec: &NetworkSpec) -> Result<(Layer, usize, usize)> {
    let layout = spec.layout();
    for b in layout.blocks() {
        if b.range().contains(&c.0) {
            let local = c.0 - b.offset;
            return Ok((b.layer, local / b.cols, local % b.cols));
        }
    }
    Err(QuineError::InvalidArgument(format!(
        "coordinate {} out of range [0, {})",
        c.0,
        layout.total()
    )))
}

/// Inverse of [`locate`].
pub fn flatten(layer: Layer, row: usize, col: usize, spec: &NetworkSpec) -> Result<Coordinate> {
    let b = spec
        .layout()
        .block(layer)
        .ok_or_else(|| QuineError::InvalidArgument(format!("layer {} not present in this variant", layer.name())))?;
    if row >= b.rows || col >= b.cols {
        return Err(QuineError::InvalidArgument(format!(
            "({row}, {col}) outside {}x{} block {}",
            b.rows,
            b.cols,
            layer.name()
        )));
    }
    Ok(Coordinate(b.offset + row * b.cols + col))
}

/// The flat, canonically ordered trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self(vec![0.0; spec.n_params()])
    }

    pub fn from_vec(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(QuineError::InvalidArgument(format!(
                "parameter vector has {} entries, spec needs {}",
                values.len(),
                spec.n_params()
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.0[b.range()]
    }

    /// One weight block as a matrix.
    pub fn matrix(&self, spec: &NetworkSpec, layer: Layer) -> Result<DenseMatrix> {
        let b = spec
            .layout()
            .block(layer)
            .ok_or_else(|| QuineError::InvalidArgument(format!("layer {} not present", layer.name())))?;
        DenseMatrix::from_vec(b.rows, b.cols, self.block(b).to_vec())
    }

    /// FNV-1a hash over the raw bits, for cheap "did this change" checks.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.0)
    }
}

pub(crate) fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    /// He initialisation, `N(0, 2 / ((1 + a²) fan_in))` with negative slope `a`.
    He { negative_slope: f64 },
    /// All zeros: the zero quine.
    Zero,
}

/// Negative slope of the default initialiser. With `a = √5` the variance is
/// `1 / (3 fan_in)`, i.e. the same variance as the common `U(±1/√fan_in)`
/// linear-layer default.
pub const DEFAULT_INIT_SLOPE: f64 = 2.236_067_977_499_79;

impl Default for Init {
    fn default() -> Self {
        Init::He {
            negative_slope: DEFAULT_INIT_SLOPE,
        }
    }
}

impl Init {
    /// He initialisation for plain rectifiers, `N(0, 2 / fan_in)`.
    pub fn he_relu() -> Self {
        Init::He { negative_slope: 0.0 }
    }
}

pub fn init_params(spec: &NetworkSpec, init: Init, rng: &mut Rng) -> ParamVector {
    let mut params = ParamVector::zeros(spec);
    if let Init::He { negative_slope } = init {
        for b in spec.layout().blocks() {
            let std = he_std(b.fan_in(), negative_slope);
            for v in &mut params.0[b.range()] {
                *v = std * rng.normal();
            }
        }
    }
    params
}

/// The frozen random embeddings. Rebuilt bit-identically from `(spec, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedProjections {
    seed: u64,
    coord_embed_dim: usize,
    coord_rows: Vec<f64>,
    scalar_column: Vec<f64>,
    image_proj: Option<DenseMatrix>,
}

impl FixedProjections {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row `c` of the (implicit) `n_params x coord_embed_dim` projection.
    pub fn coord_row(&self, c: usize) -> &[f64] {
        &self.coord_rows[c * self.coord_embed_dim..(c + 1) * self.coord_embed_dim]
    }

    pub fn coord_rows(&self) -> &[f64] {
        &self.coord_rows
    }

    pub fn scalar_column(&self) -> &[f64] {
        &self.scalar_column
    }

    pub fn image_proj(&self) -> Option<&DenseMatrix> {
        self.image_proj.as_ref()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = fingerprint(&self.coord_rows) ^ fingerprint(&self.scalar_column).rotate_left(17);
        if let Some(m) = &self.image_proj {
            h ^= fingerprint(m.data()).rotate_left(31);
        }
        h
    }

    /// `image_proj · image`.
    pub fn project_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.image_proj
            .as_ref()
            .ok_or_else(|| QuineError::InvalidArgument("vanilla quines have no image projection".into()))?
            .matvec(image)
    }
}

/// Coordinate rows are i.i.d. `N(0, coord_proj_std²)`; the image projection is
/// i.i.d. `N(0, 2 / image_dim)`.
pub fn build_projections(spec: &NetworkSpec, seed: u64) -> FixedProjections {
    let d = spec.coord_embed_dim;
    let n = spec.n_params();
    let std = spec.coord_proj_std;
    let mut rng = Rng::derive(seed, Stream::Projection, 0);
    let coord_rows = (0..n * d).map(|_| std * rng.normal()).collect();
    let mut rng = Rng::derive(seed, Stream::Projection, 1);
    let scalar_column = (0..d).map(|_| std * rng.normal()).collect();
    let image_proj = spec.is_auxiliary().then(|| {
        let mut rng = Rng::derive(seed, Stream::Projection, 2);
        let std = (2.0 / spec.image_dim as f64).sqrt();
        let data = (0..spec.image_embed_dim * spec.image_dim).map(|_| std * rng.normal()).collect();
        DenseMatrix::from_vec(spec.image_embed_dim, spec.image_dim, data).expect("shape is consistent")
    });
    FixedProjections {
        seed,
        coord_embed_dim: d,
        coord_rows,
        scalar_column,
        image_proj,
    }
}

/// Normalised scalar input used by [`Encoding::Scalar`].
pub fn scalar_position(c: usize, n_params: usize) -> f64 {
    if n_params <= 1 {
        return 0.0;
    }
    c as f64 / (n_params - 1) as f64 - 0.5
}

/// Writes the coordinate embedding (before the activation) into `out`.
fn write_coordinate_embedding(c: usize, proj: &FixedProjections, spec: &NetworkSpec, out: &mut [f64]) {
    match spec.encoding {
        Encoding::OneHot => out.copy_from_slice(proj.coord_row(c)),
        Encoding::Scalar => {
            let s = scalar_position(c, spec.n_params());
            for (o, col) in out.iter_mut().zip(proj.scalar_column()) {
                *o = s * col;
            }
        }
    }
}

pub fn embed_coordinate(c: Coordinate, proj: &FixedProjections, spec: &NetworkSpec) -> Result<Vec<f64>> {
    check_coordinate(c, spec)?;
    let mut out = vec![0.0; spec.coord_embed_dim];
    write_coordinate_embedding(c.0, proj, spec, &mut out);
    Ok(out)
}

fn check_coordinate(c: Coordinate, spec: &NetworkSpec) -> Result<()> {
    if c.0 >= spec.n_params() {
        return Err(QuineError::InvalidArgument(format!(
            "coordinate {} out of range [0, {})",
            c.0,
            spec.n_params()
        )));
    }
    Ok(())
}

/// Cached layer values of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    /// Embedding before the activation.
    pub z0: Vec<f64>,
    pub h0: Vec<f64>,
    pub z1: Vec<f64>,
    pub h1: Vec<f64>,
    pub z2: Vec<f64>,
    pub h2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaOutput {
    pub prediction: f64,
    pub activations: Activations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxOutput {
    pub prediction: f64,
    /// Raw logits `W_aux · h2` (before the temperature).
    pub logits: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub activations: Activations,
}

fn ensure_finite(values: &[f64], layer: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(QuineError::NumericOverflow { layer })
    }
}

fn check_params(params: &ParamVector, spec: &NetworkSpec) -> Result<()> {
    if params.len() != spec.n_params() {
        return Err(QuineError::InvalidArgument(format!(
            "parameter vector has {} entries, spec needs {}",
            params.len(),
            spec.n_params()
        )));
    }
    Ok(())
}

fn hidden_layers(params: &ParamVector, spec: &NetworkSpec, z0: Vec<f64>) -> Result<(Activations, f64)> {
    let layout = spec.layout();
    let b1 = layout.blocks()[0];
    let b2 = layout.blocks()[1];
    let bo = layout.blocks()[2];
    let h0: Vec<f64> = z0.iter().map(|&x| selu(x)).collect();
    ensure_finite(&h0, "embedding")?;
    let z1: Vec<f64> = params.block(b1).chunks(b1.cols).map(|row| dot(row, &h0)).collect();
    let h1: Vec<f64> = z1.iter().map(|&x| selu(x)).collect();
    ensure_finite(&h1, "hidden1")?;
    let z2: Vec<f64> = params.block(b2).chunks(b2.cols).map(|row| dot(row, &h1)).collect();
    let h2: Vec<f64> = z2.iter().map(|&x| selu(x)).collect();
    ensure_finite(&h2, "hidden2")?;
    let prediction = dot(params.block(bo), &h2);
    if !prediction.is_finite() {
        return Err(QuineError::NumericOverflow { layer: "output" });
    }
    Ok((Activations { z0, h0, z1, h1, z2, h2 }, prediction))
}

pub fn forward_vanilla(
    params: &ParamVector,
    proj: &FixedProjections,
    c: Coordinate,
    spec: &NetworkSpec,
) -> Result<VanillaOutput> {
    check_params(params, spec)?;
    check_coordinate(c, spec)?;
    if spec.is_auxiliary() {
        return Err(QuineError::InvalidArgument("forward_vanilla called with an auxiliary spec".into()));
    }
    let mut z0 = vec![0.0; spec.embed_dim];
    write_coordinate_embedding(c.0, proj, spec, &mut z0);
    let (activations, prediction) = hidden_layers(params, spec, z0)?;
    Ok(VanillaOutput { prediction, activations })
}

/// Forward pass of the auxiliary quine for one `(coordinate, image)` pair.
pub fn forward_aux(
    params: &ParamVector,
    proj: &FixedProjections,
    c: Coordinate,
    image: &[f64],
    spec: &NetworkSpec,
    temperature: f64,
) -> Result<AuxOutput> {
    if !spec.is_auxiliary() {
        return Err(QuineError::InvalidArgument("forward_aux needs an auxiliary spec".into()));
    }
    if image.len() != spec.image_dim {
        return Err(QuineError::InvalidArgument(format!(
            "image has {} values, expected {}",
            image.len(),
            spec.image_dim
        )));
    }
    let projected = proj.project_image(image)?;
    forward_aux_projected(params, proj, c, &projected, spec, temperature)
}

/// As [`forward_aux`], with the image already passed through the projection.
pub fn forward_aux_projected(
    params: &ParamVector,
    proj: &FixedProjections,
    c: Coordinate,
    projected_image: &[f64],
    spec: &NetworkSpec,
    temperature: f64,
) -> Result<AuxOutput> {
    check_params(params, spec)?;
    check_coordinate(c, spec)?;
    check_temperature(temperature)?;
    let mut z0 = vec![0.0; spec.embed_dim];
    write_coordinate_embedding(c.0, proj, spec, &mut z0[..spec.coord_embed_dim]);
    z0[spec.coord_embed_dim..].copy_from_slice(projected_image);
    let (activations, prediction) = hidden_layers(params, spec, z0)?;
    let ba = spec.layout().block(Layer::WAux).expect("auxiliary layout");
    let logits: Vec<f64> = params.block(ba).chunks(ba.cols).map(|row| dot(row, &activations.h2)).collect();
    ensure_finite(&logits, "classifier")?;
    let class_probs = softmax_with_temperature(&logits, temperature);
    Ok(AuxOutput {
        prediction,
        logits,
        class_probs,
        activations,
    })
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(QuineError::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// `softmax(logits / temperature)` with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Buffers for batched forward and backward passes.
///
/// All `B x width` arrays are row-major with one row per batch element. Each
/// output entry is still accumulated over its inputs in ascending order, so
/// batched results are bitwise equal to the single-coordinate path.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    pub(crate) batch: usize,
    pub(crate) w1_t: Vec<f64>,
    pub(crate) w2_t: Vec<f64>,
    pub(crate) z0: Vec<f64>,
    pub(crate) h0: Vec<f64>,
    pub(crate) z1: Vec<f64>,
    pub(crate) h1: Vec<f64>,
    pub(crate) z2: Vec<f64>,
    pub(crate) h2: Vec<f64>,
    pub(crate) pred: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    // backward scratch
    pub(crate) d2: Vec<f64>,
    pub(crate) d1: Vec<f64>,
    pub(crate) dh: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn predictions(&self) -> &[f64] {
        &self.pred[..self.batch]
    }

    /// Raw logits, `batch x n_classes`.
    pub fn logits(&self, n_classes: usize) -> &[f64] {
        &self.logits[..self.batch * n_classes]
    }

    fn resize(&mut self, spec: &NetworkSpec, batch: usize) {
        let (e, h) = (spec.embed_dim, spec.hidden_dim);
        self.batch = batch;
        for (buf, width) in [
            (&mut self.z0, e),
            (&mut self.h0, e),
            (&mut self.z1, h),
            (&mut self.h1, h),
            (&mut self.z2, h),
            (&mut self.h2, h),
            (&mut self.d2, h),
            (&mut self.d1, h),
            (&mut self.dh, h),
        ] {
            buf.clear();
            buf.resize(batch * width, 0.0);
        }
        self.pred.clear();
        self.pred.resize(batch, 0.0);
        self.logits.clear();
        self.logits.resize(batch * spec.n_classes, 0.0);
    }
}

/// Auxiliary input for a batched pass.
#[derive(Debug, Clone, Copy)]
pub enum AuxBatch<'a> {
    /// Vanilla quine: no auxiliary input.
    None,
    /// One projected image (`image_embed_dim` values) per batch element.
    Projected(&'a [f64]),
}

/// `out[b] = W · input[b]` for each batch row, with `w_t` the transposed
/// weight (`in x out`).
fn dense_forward(w_t: &[f64], input: &[f64], in_dim: usize, out: &mut [f64], out_dim: usize) {
    for (x, o) in input.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        o.fill(0.0);
        for (k, &xk) in x.iter().enumerate() {
            axpy(xk, &w_t[k * out_dim..(k + 1) * out_dim], o);
        }
    }
}

fn activate(z: &[f64], h: &mut [f64]) {
    for (hi, &zi) in h.iter_mut().zip(z) {
        *hi = selu(zi);
    }
}

/// Batched forward pass for `coords`, filling the workspace.
pub fn forward_batch(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    coords: &[usize],
    aux: AuxBatch<'_>,
    ws: &mut Workspace,
) -> Result<()> {
    check_params(params, spec)?;
    let n = spec.n_params();
    if let Some(&bad) = coords.iter().find(|&&c| c >= n) {
        return Err(QuineError::InvalidArgument(format!("coordinate {bad} out of range [0, {n})")));
    }
    let (e, h, ce) = (spec.embed_dim, spec.hidden_dim, spec.coord_embed_dim);
    let batch = coords.len();
    ws.resize(spec, batch);
    let layout = spec.layout();
    let b1 = layout.blocks()[0];
    let b2 = layout.blocks()[1];
    let bo = layout.blocks()[2];
    ws.w1_t = transpose(params.block(b1), h, e);
    ws.w2_t = transpose(params.block(b2), h, h);

    for (i, &c) in coords.iter().enumerate() {
        write_coordinate_embedding(c, proj, spec, &mut ws.z0[i * e..i * e + ce]);
    }
    match aux {
        AuxBatch::None => {
            if spec.is_auxiliary() {
                return Err(QuineError::InvalidArgument("auxiliary quine needs an auxiliary input".into()));
            }
        }
        AuxBatch::Projected(images) => {
            let ie = spec.image_embed_dim;
            if !spec.is_auxiliary() || images.len() != batch * ie {
                return Err(QuineError::InvalidArgument(format!(
                    "expected {} projected image values, got {}",
                    batch * ie,
                    images.len()
                )));
            }
            for i in 0..batch {
                ws.z0[i * e + ce..(i + 1) * e].copy_from_slice(&images[i * ie..(i + 1) * ie]);
            }
        }
    }
    activate(&ws.z0, &mut ws.h0);
    ensure_finite(&ws.h0, "embedding")?;
    dense_forward(&ws.w1_t, &ws.h0, e, &mut ws.z1, h);
    activate(&ws.z1, &mut ws.h1);
    ensure_finite(&ws.h1, "hidden1")?;
    dense_forward(&ws.w2_t, &ws.h1, h, &mut ws.z2, h);
    activate(&ws.z2, &mut ws.h2);
    ensure_finite(&ws.h2, "hidden2")?;
    let w_out = params.block(bo);
    for (p, h2) in ws.pred.iter_mut().zip(ws.h2.chunks_exact(h)) {
        *p = dot(w_out, h2);
    }
    ensure_finite(&ws.pred, "output")?;
    if let Some(ba) = layout.block(Layer::WAux) {
        let k = spec.n_classes;
        let w_aux = params.block(ba);
        for (lg, h2) in ws.logits.chunks_exact_mut(k).zip(ws.h2.chunks_exact(h)) {
            for (l, row) in lg.iter_mut().zip(w_aux.chunks_exact(h)) {
                *l = dot(row, h2);
            }
        }
        ensure_finite(&ws.logits, "classifier")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&NetworkSpec::vanilla()), 20_100);
        assert_eq!(param_count(&NetworkSpec::auxiliary()), 21_100);
        assert_eq!(param_count(&NetworkSpec::vanilla_with(2, 2)), 10);
        assert_eq!(NetworkSpec::vanilla().layout().total(), 20_100);
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::vanilla().validate().is_ok());
        assert!(NetworkSpec::auxiliary().validate().is_ok());
        let mut s = NetworkSpec::auxiliary();
        s.embed_dim = 99;
        assert!(s.validate().is_err());
        assert!(NetworkSpec::vanilla().with_coord_proj_std(0.0).validate().is_err());
    }

    #[test]
    fn locate_known_coordinates() {
        let spec = NetworkSpec::vanilla();
        assert_eq!(locate(Coordinate(0), &spec).unwrap(), (Layer::W1, 0, 0));
        assert_eq!(locate(Coordinate(20_099), &spec).unwrap(), (Layer::WOut, 99, 0));
        assert_eq!(locate(Coordinate(10_000), &spec).unwrap(), (Layer::W2, 0, 0));
        assert!(locate(Coordinate(20_100), &spec).is_err());
        assert!(flatten(Layer::WAux, 0, 0, &spec).is_err());
        assert!(flatten(Layer::W1, 100, 0, &spec).is_err());
        let aux = NetworkSpec::auxiliary();
        assert_eq!(locate(Coordinate(21_099), &aux).unwrap(), (Layer::WAux, 9, 99));
    }

    #[test]
    fn locate_flatten_bijection_exhaustive() {
        for spec in [
            NetworkSpec::vanilla_with(3, 4),
            NetworkSpec::vanilla_with(10, 20),
            NetworkSpec::auxiliary_with(2, 3, 6, 7, 3),
        ] {
            for c in 0..spec.n_params() {
                let (layer, r, col) = locate(Coordinate(c), &spec).unwrap();
                assert_eq!(flatten(layer, r, col, &spec).unwrap(), Coordinate(c));
            }
        }
    }

    #[test]
    fn init_zero_and_determinism() {
        let spec = NetworkSpec::vanilla_with(4, 5);
        let z = init_params(&spec, Init::Zero, &mut Rng::new(1));
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let a = init_params(&spec, Init::default(), &mut Rng::new(9));
        let b = init_params(&spec, Init::default(), &mut Rng::new(9));
        assert_eq!(a, b);
    }

    fn sample_std(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn he_relu_init_w2_std() {
        let spec = NetworkSpec::vanilla();
        let p = init_params(&spec, Init::he_relu(), &mut Rng::new(3));
        let std = sample_std(p.block(spec.layout().blocks()[1]));
        assert!((0.13..=0.15).contains(&std), "std {std}");
    }

    #[test]
    fn default_init_w2_std() {
        let spec = NetworkSpec::vanilla();
        let p = init_params(&spec, Init::default(), &mut Rng::new(3));
        let std = sample_std(p.block(spec.layout().blocks()[1]));
        let want = (1.0f64 / 300.0).sqrt();
        assert!((std - want).abs() < 0.05 * want, "std {std}");
    }

    #[test]
    fn projections_are_reproducible_and_well_scaled() {
        let spec = NetworkSpec::auxiliary();
        let a = build_projections(&spec, 17);
        let b = build_projections(&spec, 17);
        assert_eq!(a, b);
        assert_ne!(build_projections(&spec, 18).coord_rows()[0], a.coord_rows()[0]);

        let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let s2 = spec.coord_proj_std * spec.coord_proj_std;
        let cv = var(a.coord_rows()) / s2;
        assert!((0.98..=1.02).contains(&cv), "coord variance ratio {cv}");
        let iv = var(a.image_proj().unwrap().data()) / (2.0 / 784.0);
        assert!((0.95..=1.05).contains(&iv), "image variance ratio {iv}");

        let unit = build_projections(&NetworkSpec::vanilla().with_coord_proj_std(1.0), 4);
        let uv = var(unit.coord_rows());
        assert!((0.98..=1.02).contains(&uv), "unit coord variance {uv}");
    }

    #[test]
    fn one_hot_embedding_is_row_lookup() {
        let spec = NetworkSpec::vanilla_with(6, 5);
        let proj = build_projections(&spec, 2);
        let n = spec.n_params();
        let full = DenseMatrix::from_vec(n, spec.coord_embed_dim, proj.coord_rows().to_vec()).unwrap();
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let c = (rng.uniform() * n as f64) as usize;
            let got = embed_coordinate(Coordinate(c), &proj, &spec).unwrap();
            assert_eq!(got, proj.coord_row(c));
            // one_hot(c)^T · P, column by column
            for j in 0..spec.coord_embed_dim {
                let mut s = 0.0;
                for i in 0..n {
                    let onehot = if i == c { 1.0 } else { 0.0 };
                    s += onehot * full.get(i, j);
                }
                assert_eq!(s, got[j]);
            }
        }
        assert!(embed_coordinate(Coordinate(n), &proj, &spec).is_err());
    }

    #[test]
    fn scalar_embedding_endpoints() {
        let spec = NetworkSpec::vanilla_with(4, 3).with_encoding(Encoding::Scalar);
        let proj = build_projections(&spec, 2);
        let n = spec.n_params();
        let first = embed_coordinate(Coordinate(0), &proj, &spec).unwrap();
        let last = embed_coordinate(Coordinate(n - 1), &proj, &spec).unwrap();
        for ((f, l), col) in first.iter().zip(&last).zip(proj.scalar_column()) {
            assert_eq!(*f, -0.5 * col);
            assert_eq!(*l, 0.5 * col);
        }
        assert_eq!(scalar_position(0, 1), 0.0);
    }

    #[test]
    fn zero_quine_predicts_zero() {
        let spec = NetworkSpec::vanilla_with(5, 4);
        let proj = build_projections(&spec, 1);
        let p = ParamVector::zeros(&spec);
        for c in 0..spec.n_params() {
            assert_eq!(forward_vanilla(&p, &proj, Coordinate(c), &spec).unwrap().prediction, 0.0);
        }
        let aux = NetworkSpec::auxiliary_with(3, 3, 4, 5, 10);
        let proj = build_projections(&aux, 1);
        let out = forward_aux(&ParamVector::zeros(&aux), &proj, Coordinate(2), &[0.5; 5], &aux, 0.01).unwrap();
        assert_eq!(out.prediction, 0.0);
        for p in out.class_probs {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn output_head_is_linear() {
        let spec = NetworkSpec::vanilla_with(5, 4);
        let proj = build_projections(&spec, 1);
        let mut p = init_params(&spec, Init::he_relu(), &mut Rng::new(5));
        let c = Coordinate(7);
        let before = forward_vanilla(&p, &proj, c, &spec).unwrap().prediction;
        let bo = spec.layout().blocks()[2];
        for v in &mut p.as_mut_slice()[bo.range()] {
            *v *= 2.0;
        }
        let after = forward_vanilla(&p, &proj, c, &spec).unwrap().prediction;
        assert_eq!(after, 2.0 * before);
    }

    #[test]
    fn overflow_names_the_layer() {
        let spec = NetworkSpec::vanilla_with(3, 3).with_coord_proj_std(1.0);
        let proj = build_projections(&spec, 1);
        let h0 = |c: usize| -> Vec<f64> { proj.coord_row(c).iter().map(|&x| selu(x)).collect() };
        let c = (0..spec.n_params())
            .max_by(|&a, &b| {
                let na: f64 = h0(a).iter().map(|v| v.abs()).sum();
                let nb: f64 = h0(b).iter().map(|v| v.abs()).sum();
                na.total_cmp(&nb)
            })
            .unwrap();
        assert!(h0(c).iter().map(|v| v.abs()).sum::<f64>() > 1.5);
        // first row of W1 aligned with h0 so that z1[0] overflows
        let mut p = ParamVector::zeros(&spec);
        for (w, v) in p.as_mut_slice()[..3].iter_mut().zip(h0(c)) {
            *w = f64::MAX * v.signum();
        }
        let err = forward_vanilla(&p, &proj, Coordinate(c), &spec).unwrap_err();
        assert!(matches!(err, QuineError::NumericOverflow { layer: "hidden1" }), "{err}");
        p.as_mut_slice()[0] = f64::NAN;
        let err = forward_vanilla(&p, &proj, Coordinate(0), &spec).unwrap_err();
        assert!(matches!(err, QuineError::NumericOverflow { .. }));
    }

    #[test]
    fn softmax_sums_to_one_and_is_stable() {
        let probs = softmax_with_temperature(&[1000.0, -3.0, 0.5], 0.01);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|p| p.is_finite()));
        assert_eq!(argmax(&[0.1, 0.1, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn batched_forward_matches_single_path_bitwise() {
        let spec = NetworkSpec::vanilla_with(7, 6);
        let proj = build_projections(&spec, 3);
        let p = init_params(&spec, Init::he_relu(), &mut Rng::new(4));
        let coords: Vec<usize> = (0..spec.n_params()).step_by(3).collect();
        let mut ws = Workspace::new();
        forward_batch(&p, &proj, &spec, &coords, AuxBatch::None, &mut ws).unwrap();
        for (i, &c) in coords.iter().enumerate() {
            let single = forward_vanilla(&p, &proj, Coordinate(c), &spec).unwrap().prediction;
            assert_eq!(ws.predictions()[i].to_bits(), single.to_bits());
        }

        let aux = NetworkSpec::auxiliary_with(3, 2, 5, 6, 4);
        let proj = build_projections(&aux, 3);
        let p = init_params(&aux, Init::he_relu(), &mut Rng::new(4));
        let mut rng = Rng::new(1);
        let images: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.uniform()).collect()).collect();
        let projected: Vec<f64> = images.iter().flat_map(|im| proj.project_image(im).unwrap()).collect();
        let coords = [0usize, 5, 17, aux.n_params() - 1];
        forward_batch(&p, &proj, &aux, &coords, AuxBatch::Projected(&projected), &mut ws).unwrap();
        for (i, &c) in coords.iter().enumerate() {
            let single = forward_aux(&p, &proj, Coordinate(c), &images[i], &aux, 0.01).unwrap();
            assert_eq!(ws.predictions()[i].to_bits(), single.prediction.to_bits());
            assert_eq!(&ws.logits(4)[i * 4..(i + 1) * 4], single.logits.as_slice());
        }
    }
}
