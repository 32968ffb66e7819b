//! Cell grids, multi-scale perception, the residual update rule and rollouts.
//!
//! A grid is an `H×W×C` field. Channels `0..4` hold RGBA, the rest are hidden
//! state. One step perceives every cell's neighborhood through fixed
//! depthwise filters, maps each perception vector through two affine layers
//! (ReLU between them, none after) and adds the result to the old state. All
//! cells update synchronously; borders are zero padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Number of leading channels rendered as RGBA.
pub const RGBA: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionConfig {
    pub sobel_sizes: Vec<usize>,
    pub localmax_window: usize,
    pub include_identity: bool,
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        for &s in &self.sobel_sizes {
            if s < 3 || s % 2 == 0 {
                return Err(Error::Config(format!(
                    "sobel size {s} must be odd and >= 3"
                )));
            }
        }
        if self.localmax_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "local max window {} must be odd",
                self.localmax_window
            )));
        }
        Ok(())
    }

    /// Filters applied to each channel: identity, x/y Sobel per size, local max.
    pub fn filters_per_channel(&self) -> usize {
        usize::from(self.include_identity) + 2 * self.sobel_sizes.len() + 1
    }

    pub fn perception_dim(&self, channels: usize) -> usize {
        channels * self.filters_per_channel()
    }

    /// Reach of one step: cells farther than this from a cell cannot affect it.
    pub fn radius(&self) -> usize {
        self.sobel_sizes
            .iter()
            .chain(std::iter::once(&self.localmax_window))
            .map(|k| (k - 1) / 2)
            .max()
            .unwrap_or(0)
    }
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 1..n {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row
}

/// Horizontal and vertical Sobel kernels of odd `size`.
///
/// `Kx[i][j] = smooth[i] · deriv[j]` where `smooth` is the binomial row of
/// length `size` and `deriv` is `[-1, 0, 1]` convolved with the binomial row
/// of length `size − 2`. `Ky = Kxᵀ`. Size 3 gives the classic Sobel pair.
pub fn sobel_kernels<T: Scalar>(size: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sobel size {size} must be odd and >= 3"
        )));
    }
    let smooth = binomial_row(size);
    let inner = binomial_row(size - 2);
    let mut deriv = vec![0.0; size];
    for (k, &a) in [-1.0, 0.0, 1.0].iter().enumerate() {
        for (m, &b) in inner.iter().enumerate() {
            deriv[k + m] += a * b;
        }
    }
    let kx = Tensor::from_fn([size, size], |idx| {
        T::from_f64_lossy(smooth[idx / size] * deriv[idx % size])
    });
    let ky = Tensor::from_fn([size, size], |idx| {
        T::from_f64_lossy(smooth[idx % size] * deriv[idx / size])
    });
    Ok((kx, ky))
}

/// Precomputed perception filters.
///
/// Sobel responses are divided by the kernel's L1 norm so every feature is
/// bounded by the largest state magnitude in the window, whatever the size.
#[derive(Clone, Debug)]
pub struct Perception<T: Scalar = f32> {
    config: PerceptionConfig,
    sobel: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Perception<T> {
    pub fn new(config: &PerceptionConfig) -> Result<Self> {
        config.validate()?;
        let mut sizes = config.sobel_sizes.clone();
        sizes.sort_unstable();
        let sobel = sizes
            .iter()
            .map(|&s| {
                let (kx, ky) = sobel_kernels::<T>(s)?;
                let l1: T = kx.data().iter().map(|v| v.abs()).sum();
                Ok((kx.map(|v| v / l1), ky.map(|v| v / l1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            sobel,
        })
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.config
    }

    /// The normalized `(Kx, Ky)` pairs in ascending size order.
    pub fn kernels(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.sobel
    }
}

/// An `H×W×C` cell-state field.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid<T: Scalar = f32> {
    state: Tensor<T>,
}

impl<T: Scalar> CellGrid<T> {
    pub fn from_state(state: Tensor<T>) -> Result<Self> {
        match *state.shape() {
            [_, _, c] if c >= RGBA => Ok(Self { state }),
            ref s => Err(Error::Config(format!(
                "cell grid needs shape H×W×C with C >= 4, got {s:?}"
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.state.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.state.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.state.shape()[2]
    }

    pub fn state(&self) -> &Tensor<T> {
        &self.state
    }

    pub fn into_state(self) -> Tensor<T> {
        self.state
    }

    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let c = self.channels();
        let o = (y * self.width() + x) * c;
        &self.state.data()[o..o + c]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let c = self.channels();
        let o = (y * self.width() + x) * c;
        &mut self.state.data_mut()[o..o + c]
    }

    /// Unclamped RGBA channels, as used by the loss.
    pub fn rgba_raw(&self) -> Tensor<T> {
        let c = self.channels();
        let data = self
            .state
            .data()
            .chunks_exact(c)
            .flat_map(|cell| cell[..RGBA].iter().copied())
            .collect();
        Tensor::new([self.height(), self.width(), RGBA], data).expect("shape from grid")
    }
}

/// A black canvas with a single white cell at `(⌊H/2⌋, ⌊W/2⌋)`: zero
/// everywhere except that cell's RGBA channels, which are 1.
pub fn seed_canvas<T: Scalar>(height: usize, width: usize, channels: usize) -> Result<CellGrid<T>> {
    if channels < RGBA {
        return Err(Error::Config(format!(
            "cells need at least 4 channels, got {channels}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("canvas must be at least 1×1".into()));
    }
    let mut grid = CellGrid {
        state: Tensor::zeros([height, width, channels]),
    };
    grid.cell_mut(height / 2, width / 2)[..RGBA].fill(T::one());
    Ok(grid)
}

/// Channels `0..4` clamped to `[0, 1]` for rendering.
pub fn extract_rgba<T: Scalar>(grid: &CellGrid<T>) -> Tensor<T> {
    grid.rgba_raw().map(|v| v.max(T::zero()).min(T::one()))
}

/// Parameters of the per-cell update network.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleParams<T: Scalar = f32> {
    /// `P×d`
    pub w1: Tensor<T>,
    /// `d`
    pub b1: Tensor<T>,
    /// `d×C`
    pub w2: Tensor<T>,
    /// `C`
    pub b2: Tensor<T>,
}

pub const RULE_BLOCKS: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// Shapes of the four rule blocks for perception width `p`, hidden width `d`
/// and `c` channels.
pub fn rule_shapes(p: usize, d: usize, c: usize) -> [Vec<usize>; 4] {
    [vec![p, d], vec![d], vec![d, c], vec![c]]
}

impl<T: Scalar> RuleParams<T> {
    /// Random first layer (`N(0, 1/P)`), zero biases, second layer scaled by
    /// `w2_scale`.
    pub fn init(
        rng: &mut Rng,
        cfg: &PerceptionConfig,
        channels: usize,
        hidden: usize,
        w2_scale: f64,
    ) -> Self {
        let p = cfg.perception_dim(channels);
        let std1 = (1.0 / p as f64).sqrt();
        let std2 = w2_scale * (1.0 / hidden as f64).sqrt();
        Self {
            w1: Tensor::from_fn([p, hidden], |_| T::from_f64_lossy(std1 * rng.normal())),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::from_fn([hidden, channels], |_| {
                T::from_f64_lossy(std2 * rng.normal())
            }),
            b2: Tensor::zeros([channels]),
        }
    }

    pub fn blocks(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn from_blocks(blocks: [Tensor<T>; 4]) -> Self {
        let [w1, b1, w2, b2] = blocks;
        Self { w1, b1, w2, b2 }
    }

    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }

    pub fn channels(&self) -> usize {
        self.b2.numel()
    }

    pub fn numel(&self) -> usize {
        self.blocks().iter().map(|t| t.numel()).sum()
    }

    /// Checks block shapes against the perception config and channel count.
    pub fn validate(&self, cfg: &PerceptionConfig, channels: usize) -> Result<()> {
        let expected = rule_shapes(cfg.perception_dim(channels), self.hidden(), channels);
        for ((name, block), shape) in RULE_BLOCKS.iter().zip(self.blocks()).zip(&expected) {
            if block.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "rule block {name} has shape {:?}, config needs {shape:?}",
                    block.shape()
                )));
            }
            if !block.is_finite() {
                return Err(Error::Config(format!("rule block {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> RuleVars {
        let mut rec = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        RuleVars {
            w1: rec(&self.w1),
            b1: rec(&self.b1),
            w2: rec(&self.w2),
            b2: rec(&self.b2),
        }
    }
}

/// Rule parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RuleVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl RuleVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Perception field `H×W×P`. Channel order per cell: identity (if enabled),
/// then Sobel-x and Sobel-y for each size ascending, then local max; each
/// block spans all `C` channels.
pub fn perceive_on<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Var,
    perception: &Perception<T>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(perception.config.filters_per_channel());
    if perception.config.include_identity {
        parts.push(grid);
    }
    for (kx, ky) in &perception.sobel {
        parts.push(tape.conv2d_depthwise(grid, kx)?);
        parts.push(tape.conv2d_depthwise(grid, ky)?);
    }
    parts.push(tape.local_max(grid, perception.config.localmax_window)?);
    tape.concat_channels(&parts)
}

pub fn perceive<T: Scalar>(grid: &CellGrid<T>, cfg: &PerceptionConfig) -> Result<Tensor<T>> {
    let perception = Perception::new(cfg)?;
    let mut tape = Tape::new();
    let g = tape.constant(grid.state.clone());
    let out = perceive_on(&mut tape, g, &perception)?;
    Ok(tape.value(out).clone())
}

/// One synchronous update: `state + relu(p·W1 + b1)·W2 + b2` per cell.
pub fn nca_step_on<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Var,
    rule: &RuleVars,
    perception: &Perception<T>,
) -> Result<Var> {
    let channels = tape.value(grid).last_dim();
    let expected = perception.config.perception_dim(channels);
    let rows = tape.value(rule.w1).shape()[0];
    if rows != expected {
        return Err(Error::Config(format!(
            "perception width {expected} does not match W1 with {rows} rows"
        )));
    }
    let p = perceive_on(tape, grid, perception)?;
    let hidden = tape.affine(p, rule.w1, Some(rule.b1))?;
    let hidden = tape.relu(hidden);
    let delta = tape.affine(hidden, rule.w2, Some(rule.b2))?;
    tape.add(grid, delta)
}

pub fn rollout_on<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Var,
    rule: &RuleVars,
    perception: &Perception<T>,
    steps: usize,
) -> Result<Var> {
    let mut g = grid;
    for _ in 0..steps {
        g = nca_step_on(tape, g, rule, perception)?;
    }
    Ok(g)
}

fn step_with<T: Scalar>(
    grid: &CellGrid<T>,
    params: &RuleParams<T>,
    perception: &Perception<T>,
) -> Result<CellGrid<T>> {
    let mut tape = Tape::new();
    let g = tape.constant(grid.state.clone());
    let rule = params.bind(&mut tape, false);
    let next = nca_step_on(&mut tape, g, &rule, perception)?;
    Ok(CellGrid {
        state: tape.value(next).clone(),
    })
}

pub fn nca_step<T: Scalar>(
    grid: &CellGrid<T>,
    params: &RuleParams<T>,
    cfg: &PerceptionConfig,
) -> Result<CellGrid<T>> {
    params.validate(cfg, grid.channels())?;
    step_with(grid, params, &Perception::new(cfg)?)
}

/// Result of a rollout: the final grid plus clamped RGBA frames taken after
/// every `snapshot_every`-th step (`⌊T/k⌋` frames).
#[derive(Clone, Debug)]
pub struct Rollout<T: Scalar = f32> {
    pub grid: CellGrid<T>,
    pub frames: Vec<Tensor<T>>,
}

pub fn rollout<T: Scalar>(
    grid: &CellGrid<T>,
    params: &RuleParams<T>,
    cfg: &PerceptionConfig,
    steps: usize,
    snapshot_every: Option<usize>,
) -> Result<Rollout<T>> {
    fuse_rollout_frames(
        grid,
        params,
        params,
        cfg,
        steps,
        steps.max(1),
        snapshot_every,
    )
}

/// Alternates two rules: `period` steps of `a`, then `period` of `b`, and so
/// on, starting with `a`.
pub fn fuse_rollout<T: Scalar>(
    grid: &CellGrid<T>,
    a: &RuleParams<T>,
    b: &RuleParams<T>,
    cfg: &PerceptionConfig,
    steps: usize,
    period: usize,
) -> Result<CellGrid<T>> {
    Ok(fuse_rollout_frames(grid, a, b, cfg, steps, period, None)?.grid)
}

pub fn fuse_rollout_frames<T: Scalar>(
    grid: &CellGrid<T>,
    a: &RuleParams<T>,
    b: &RuleParams<T>,
    cfg: &PerceptionConfig,
    steps: usize,
    period: usize,
    snapshot_every: Option<usize>,
) -> Result<Rollout<T>> {
    if period == 0 {
        return Err(Error::Config("fusion period must be at least 1".into()));
    }
    if snapshot_every == Some(0) {
        return Err(Error::Config("snapshot_every must be at least 1".into()));
    }
    a.validate(cfg, grid.channels())?;
    b.validate(cfg, grid.channels())?;
    let perception = Perception::new(cfg)?;
    let mut g = grid.clone();
    let mut frames = Vec::new();
    for t in 0..steps {
        let rule = if (t / period).is_multiple_of(2) { a } else { b };
        g = step_with(&g, rule, &perception)?;
        if let Some(k) = snapshot_every {
            if (t + 1) % k == 0 {
                frames.push(extract_rgba(&g));
            }
        }
    }
    Ok(Rollout { grid: g, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sizes: &[usize], identity: bool) -> PerceptionConfig {
        PerceptionConfig {
            sobel_sizes: sizes.to_vec(),
            localmax_window: 3,
            include_identity: identity,
        }
    }

    fn random_rule(rng: &mut Rng, cfg: &PerceptionConfig, c: usize, d: usize) -> RuleParams<f32> {
        let shapes = rule_shapes(cfg.perception_dim(c), d, c);
        RuleParams::from_blocks(shapes.map(|s| Tensor::from_fn(s, |_| 0.3 * rng.normal() as f32)))
    }

    #[test]
    fn sobel_3_is_canonical() {
        let (kx, ky) = sobel_kernels::<f64>(3).unwrap();
        assert_eq!(kx.data(), &[-1., 0., 1., -2., 0., 2., -1., 0., 1.]);
        assert_eq!(ky.data(), &[-1., -2., -1., 0., 0., 0., 1., 2., 1.]);
    }

    #[test]
    fn sobel_5_golden() {
        // smooth = [1,4,6,4,1], deriv = [-1,0,1] * [1,2,1] = [-1,-2,0,2,1]
        let (kx, ky) = sobel_kernels::<f64>(5).unwrap();
        #[rustfmt::skip]
        let golden = [
            -1., -2., 0., 2., 1.,
            -4., -8., 0., 8., 4.,
            -6., -12., 0., 12., 6.,
            -4., -8., 0., 8., 4.,
            -1., -2., 0., 2., 1.,
        ];
        assert_eq!(kx.data(), &golden);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(ky.data()[i * 5 + j], kx.data()[j * 5 + i]);
            }
        }
    }

    #[test]
    fn sobel_7_derivative_row() {
        let (kx, _) = sobel_kernels::<f64>(7).unwrap();
        // Middle row is smooth[3] = 20 times deriv.
        let mid: Vec<f64> = kx.data()[21..28].iter().map(|v| v / 20.0).collect();
        assert_eq!(mid, vec![-1., -4., -5., 0., 5., 4., 1.]);
    }

    #[test]
    fn sobel_rows_sum_to_zero() {
        for size in [3, 5, 7, 9, 11] {
            let (kx, ky) = sobel_kernels::<f64>(size).unwrap();
            for row in kx.data().chunks(size) {
                assert!(row.iter().sum::<f64>().abs() <= 1e-6);
            }
            assert!(ky.data().iter().sum::<f64>().abs() <= 1e-6);
        }
    }

    #[test]
    fn sobel_even_size_rejected() {
        assert!(matches!(sobel_kernels::<f32>(4), Err(Error::Config(_))));
        assert!(matches!(sobel_kernels::<f32>(1), Err(Error::Config(_))));
    }

    #[test]
    fn seed_canvas_examples() {
        let g = seed_canvas::<f32>(1, 1, 4).unwrap();
        assert_eq!(g.state().data(), &[1., 1., 1., 1.]);

        let g = seed_canvas::<f32>(3, 3, 8).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                if (y, x) == (1, 1) {
                    assert_eq!(g.cell(y, x), &[1., 1., 1., 1., 0., 0., 0., 0.]);
                } else {
                    assert!(g.cell(y, x).iter().all(|&v| v == 0.0));
                }
            }
        }

        let g = seed_canvas::<f32>(28, 28, 8).unwrap();
        assert_eq!(g.state().data().iter().sum::<f32>(), 4.0);
        assert_eq!(g.cell(14, 14)[..4], [1.0; 4]);

        assert!(matches!(seed_canvas::<f32>(3, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn perception_dims() {
        let c = cfg(&[3, 7], true);
        assert_eq!(c.perception_dim(8), 48);
        assert_eq!(cfg(&[3, 7], false).perception_dim(8), 40);
        assert_eq!(cfg(&[3, 5, 9], true).perception_dim(24), 24 * 8);
        assert_eq!(c.radius(), 3);
    }

    #[test]
    fn perceive_zero_grid_is_zero() {
        let g = CellGrid::from_state(Tensor::<f32>::zeros([5, 5, 4])).unwrap();
        let p = perceive(&g, &cfg(&[3, 5], true)).unwrap();
        assert_eq!(p.shape(), &[5, 5, 24]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perceive_golden_on_seed() {
        // Seeded 3×3×4 grid, identity + Sobel 3 + local max 3 → P = 16.
        // Cell (0,0) sees the seed at offset (+1,+1): Kx/8 at (2,2) is 1/8,
        // Ky/8 at (2,2) is 1/8, and the 3×3 max is 1.
        let g = seed_canvas::<f64>(3, 3, 4).unwrap();
        let p = perceive(&g, &cfg(&[3], true)).unwrap();
        let corner = &p.data()[..16];
        let expected = [
            0., 0., 0., 0., // identity
            0.125, 0.125, 0.125, 0.125, // sobel x
            0.125, 0.125, 0.125, 0.125, // sobel y
            1., 1., 1., 1., // local max
        ];
        assert_eq!(corner, &expected);
        // Center: identity 1, zero gradients, max 1.
        let center = &p.data()[4 * 16..5 * 16];
        assert_eq!(&center[..4], &[1.; 4]);
        assert!(center[4..12].iter().all(|&v| v == 0.0));
        assert_eq!(&center[12..], &[1.; 4]);
    }

    #[test]
    fn zero_second_layer_is_identity() {
        let mut rng = Rng::seeded(1);
        let c = cfg(&[3, 7], true);
        let mut rule = random_rule(&mut rng, &c, 8, 16);
        rule.w2 = Tensor::zeros([16, 8]);
        rule.b2 = Tensor::zeros([8]);
        let g = CellGrid::from_state(Tensor::from_fn([6, 6, 8], |_| rng.normal() as f32)).unwrap();
        let next = nca_step(&g, &rule, &c).unwrap();
        assert_eq!(next, g);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_cell_matches_scalar_arithmetic() {
        // 1×1×4 grid, identity + Sobel 3 + max 3, d = 2. On a 1×1 grid every
        // Sobel response is zero and the max is max(0, x).
        let c = cfg(&[3], true);
        let state = [0.5f64, -1.0, 2.0, -0.25];
        let grid = CellGrid::from_state(Tensor::new([1, 1, 4], state.to_vec()).unwrap()).unwrap();
        let mut rng = Rng::seeded(4);
        let rule: RuleParams<f64> = RuleParams::from_blocks(
            rule_shapes(16, 2, 4).map(|s| Tensor::from_fn(s, |_| rng.normal())),
        );
        let mut p = [0.0; 16];
        p[..4].copy_from_slice(&state);
        for ch in 0..4 {
            p[12 + ch] = state[ch].max(0.0);
        }
        let mut h = [0.0; 2];
        for j in 0..2 {
            let mut acc = rule.b1.data()[j];
            for i in 0..16 {
                acc += p[i] * rule.w1.data()[i * 2 + j];
            }
            h[j] = acc.max(0.0);
        }
        let mut expected = [0.0; 4];
        for ch in 0..4 {
            let mut acc = rule.b2.data()[ch];
            for j in 0..2 {
                acc += h[j] * rule.w2.data()[j * 4 + ch];
            }
            expected[ch] = state[ch] + acc;
        }
        let next = nca_step(&grid, &rule, &c).unwrap();
        for (a, b) in next.state().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_locality() {
        let c = cfg(&[3, 7], true);
        let mut rng = Rng::seeded(2);
        let rule = random_rule(&mut rng, &c, 4, 8);
        let base =
            CellGrid::from_state(Tensor::from_fn([9, 9, 4], |_| rng.normal() as f32)).unwrap();
        let mut bumped = base.clone();
        bumped.cell_mut(4, 4)[1] += 1.0;
        let a = nca_step(&base, &rule, &c).unwrap();
        let b = nca_step(&bumped, &rule, &c).unwrap();
        let r = c.radius();
        for y in 0..9usize {
            for x in 0..9usize {
                if y.abs_diff(4) > r || x.abs_diff(4) > r {
                    assert_eq!(a.cell(y, x), b.cell(y, x), "cell ({y},{x}) changed");
                }
            }
        }
        assert_ne!(a.cell(4, 4), b.cell(4, 4));
    }

    #[test]
    fn mismatched_rule_rejected() {
        let c = cfg(&[3], true);
        let mut rng = Rng::seeded(3);
        let rule = random_rule(&mut rng, &cfg(&[3, 5], true), 4, 4);
        let g = seed_canvas::<f32>(4, 4, 4).unwrap();
        assert!(matches!(nca_step(&g, &rule, &c), Err(Error::Config(_))));
        assert!(matches!(
            fuse_rollout(&g, &rule, &rule, &c, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rollout_composition_and_degenerate_cases() {
        let c = cfg(&[3, 5], true);
        let mut rng = Rng::seeded(5);
        let a = random_rule(&mut rng, &c, 4, 6);
        let b = random_rule(&mut rng, &c, 4, 6);
        let g = seed_canvas::<f32>(7, 7, 4).unwrap();

        assert_eq!(rollout(&g, &a, &c, 0, None).unwrap().grid, g);
        let two = rollout(&g, &a, &c, 2, None).unwrap().grid;
        let manual = nca_step(&nca_step(&g, &a, &c).unwrap(), &a, &c).unwrap();
        assert_eq!(two, manual);

        let zero =
            RuleParams::from_blocks(rule_shapes(c.perception_dim(4), 6, 4).map(Tensor::zeros));
        assert_eq!(rollout(&g, &zero, &c, 5, None).unwrap().grid, g);

        assert_eq!(
            fuse_rollout(&g, &a, &a, &c, 5, 1).unwrap(),
            rollout(&g, &a, &c, 5, None).unwrap().grid
        );
        assert_eq!(
            fuse_rollout(&g, &a, &b, &c, 4, 4).unwrap(),
            rollout(&g, &a, &c, 4, None).unwrap().grid
        );
        let ab = nca_step(&nca_step(&g, &a, &c).unwrap(), &b, &c).unwrap();
        assert_eq!(fuse_rollout(&g, &a, &b, &c, 2, 1).unwrap(), ab);
        assert_ne!(
            fuse_rollout(&g, &a, &b, &c, 2, 1).unwrap(),
            fuse_rollout(&g, &b, &a, &c, 2, 1).unwrap()
        );
    }

    #[test]
    fn snapshot_cadence() {
        let c = cfg(&[3], true);
        let mut rng = Rng::seeded(6);
        let a = random_rule(&mut rng, &c, 4, 4);
        let g = seed_canvas::<f32>(5, 5, 4).unwrap();
        assert_eq!(rollout(&g, &a, &c, 10, Some(3)).unwrap().frames.len(), 3);
        let r = rollout(&g, &a, &c, 10, Some(10)).unwrap();
        assert_eq!(r.frames.len(), 1);
        assert_eq!(r.frames[0], extract_rgba(&r.grid));
    }

    #[test]
    fn rgba_extraction_clamps() {
        let g = seed_canvas::<f32>(3, 3, 6).unwrap();
        let img = extract_rgba(&g);
        assert_eq!(img.shape(), &[3, 3, 4]);
        assert_eq!(&img.data()[16..20], &[1.; 4]);
        assert_eq!(img.data().iter().sum::<f32>(), 4.0);

        let mut g = g;
        g.cell_mut(0, 0)[0] = 1.3;
        g.cell_mut(0, 0)[1] = -0.2;
        let img = extract_rgba(&g);
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert_eq!(g.rgba_raw().data()[0], 1.3);
    }
}
