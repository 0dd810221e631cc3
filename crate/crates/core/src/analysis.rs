//! Diagnostic exports: receptive-field curves and operator profiles,
//! per-kernel assignment histograms, per-kernel feature maps. Everything is
//! written as CSV with a fixed column order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::convops::{self, hard25d_bin, ConvError, LayerKind};
use crate::geometry::{relative_depth_differences, CameraIntrinsics, DepthField, GeometryError};
use crate::rfield::{assign, h_values, rebalance, softmax_inplace, RFieldParams};
use crate::synth::{Dataset, SceneSample, Split};
use crate::tensor::Tensor4;
use crate::train::{ConvLayer, Mode, ToyNet, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 2 grid steps, got {0}")]
    Steps(usize),
    #[error("empty or non-finite range [{0}, {1}]")]
    Range(f64, f64),
    #[error("block {index} is {kind}, expected malleable")]
    NotMalleable { index: usize, kind: LayerKind },
    #[error("block {index} does not exist (network has {blocks})")]
    NoSuchBlock { index: usize, blocks: usize },
    #[error("no samples in the {0} split")]
    EmptySplit(Split),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Conv(#[from] ConvError),
}

/// Named columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), AnalysisError> {
    fs::write(path, text).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `steps` evenly spaced points from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, AnalysisError> {
    if steps < 2 {
        return Err(AnalysisError::Steps(steps));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(AnalysisError::Range(lo, hi));
    }
    let step = (hi - lo) / (steps - 1) as f64;
    Ok((0..steps).map(|i| if i == steps - 1 { hi } else { lo + i as f64 * step }).collect())
}

/// Columns `d, h_0..h_{K+1}, g_0..g_{K+1}` over a grid of relative depth
/// differences.
pub fn export_rf_curves(params: &RFieldParams, lo: f64, hi: f64, steps: usize) -> Result<Table, AnalysisError> {
    let classes = params.classes();
    let mut columns = vec!["d".to_string()];
    columns.extend((0..classes).map(|m| format!("h_{m}")));
    columns.extend((0..classes).map(|m| format!("g_{m}")));
    let rows = grid(lo, hi, steps)?
        .into_iter()
        .map(|d| {
            let h = h_values(d, params);
            let mut g = h.clone();
            softmax_inplace(&mut g);
            let mut row = vec![d];
            row.extend(h);
            row.extend(g);
            row
        })
        .collect();
    Ok(Table { columns, rows })
}

/// Hard 2.5D indicator profile: columns `d, k_0..k_{K-1}` with a 1 in the
/// bin holding `d`.
pub fn hard25d_profile(kernels: usize, lo: f64, hi: f64, steps: usize) -> Result<Table, AnalysisError> {
    let mut columns = vec!["d".to_string()];
    columns.extend((0..kernels).map(|k| format!("k_{k}")));
    let rows = grid(lo, hi, steps)?
        .into_iter()
        .map(|d| {
            let mut row = vec![d];
            row.extend((0..kernels).map(|k| if hard25d_bin(d, kernels) == Some(k) { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    Ok(Table { columns, rows })
}

/// Depth-aware similarity `exp(-alpha * |absolute difference|)` expressed in
/// relative-difference units at each center depth: one column `w_<depth>`
/// per entry of `center_depths`. The absolute difference behind a relative
/// difference `d` is `d * depth * spacing / focal`.
pub fn depthaware_profile(
    alpha: f64,
    center_depths: &[f64],
    focal: f64,
    spacing: f64,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Table, AnalysisError> {
    let mut columns = vec!["d".to_string()];
    columns.extend(center_depths.iter().map(|z| format!("w_{z}")));
    let rows = grid(lo, hi, steps)?
        .into_iter()
        .map(|d| {
            let mut row = vec![d];
            row.extend(center_depths.iter().map(|z| (-alpha * (d * z * spacing / focal).abs()).exp()));
            row
        })
        .collect();
    Ok(Table { columns, rows })
}

/// Length of the part of `[lo, hi]` where `sum_k g_k > 0.5`, measured on a
/// grid with `steps` points.
pub fn receptive_field_width(params: &RFieldParams, lo: f64, hi: f64, steps: usize) -> Result<f64, AnalysisError> {
    let pts = grid(lo, hi, steps)?;
    let step = (hi - lo) / (steps - 1) as f64;
    let k = params.kernels();
    let inside = pts
        .iter()
        .filter(|&&d| {
            let mut g = h_values(d, params);
            softmax_inplace(&mut g);
            g[1..=k].iter().sum::<f64>() > 0.5
        })
        .count();
    Ok(inside as f64 * step)
}

/// Default grid for [`receptive_field_width`]: `[-50, 50]` in steps of 0.01.
pub fn default_rf_width(params: &RFieldParams) -> f64 {
    receptive_field_width(params, -50.0, 50.0, 10_001).expect("fixed grid is valid")
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Per-kernel assignment mass over a dataset: raw `sum g_k` and rebalanced
/// `sum s_k * g_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignHistogram {
    pub block: usize,
    pub raw: Vec<f64>,
    pub rebalanced: Vec<f64>,
    /// Taps counted.
    pub taps: u64,
}

impl AssignHistogram {
    pub fn raw_ratios(&self) -> Vec<f64> {
        normalize(&self.raw)
    }

    pub fn rebalanced_ratios(&self) -> Vec<f64> {
        normalize(&self.rebalanced)
    }

    pub fn raw_entropy(&self) -> f64 {
        entropy(&self.raw_ratios())
    }

    pub fn rebalanced_entropy(&self) -> f64 {
        entropy(&self.rebalanced_ratios())
    }

    /// Columns `kernel, raw_sum, rebalanced_sum, raw_ratio, rebalanced_ratio`.
    pub fn table(&self) -> Table {
        let (rr, br) = (self.raw_ratios(), self.rebalanced_ratios());
        Table {
            columns: ["kernel", "raw_sum", "rebalanced_sum", "raw_ratio", "rebalanced_ratio"]
                .map(String::from)
                .to_vec(),
            rows: (0..self.raw.len())
                .map(|k| vec![k as f64, self.raw[k], self.rebalanced[k], rr[k], br[k]])
                .collect(),
        }
    }
}

fn malleable_block(net: &ToyNet, block: usize) -> Result<&convops::MalleableParams, AnalysisError> {
    let b = net.blocks.get(block).ok_or(AnalysisError::NoSuchBlock {
        index: block,
        blocks: net.blocks.len(),
    })?;
    match &b.conv {
        ConvLayer::Malleable(p) => Ok(p),
        other => Err(AnalysisError::NotMalleable {
            index: block,
            kind: other.kind(),
        }),
    }
}

/// Adds the assignment mass of one depth field (at the layer's rate) to
/// `hist`. Taps outside the image and taps whose center or neighbor has
/// invalid depth are skipped.
pub fn accumulate_assignment(
    hist: &mut AssignHistogram,
    depth: &DepthField,
    camera: &CameraIntrinsics,
    params: &convops::MalleableParams,
) -> Result<(), AnalysisError> {
    let spec = &params.spec;
    let diffs = relative_depth_differences(depth, camera, spec)?;
    let a = assign(&diffs, &params.rfield);
    let k = params.kernels();
    let (kh, kw) = spec.kernel;
    let (h, w) = (depth.h(), depth.w());
    for n in 0..diffs.n {
        for oy in 0..diffs.out_h {
            for ox in 0..diffs.out_w {
                let Some((cy, cx)) = spec.center(oy, ox, h, w) else {
                    continue;
                };
                if depth.get(n, cy, cx).is_none() {
                    continue;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let off = ky * kw + kx;
                        let i = diffs.index(n, oy, ox, off);
                        if !diffs.inside[i] {
                            continue;
                        }
                        let iy = spec.input_coord(oy, ky, spec.padding.0, h).expect("inside tap");
                        let ix = spec.input_coord(ox, kx, spec.padding.1, w).expect("inside tap");
                        if depth.get(n, iy, ix).is_none() {
                            continue;
                        }
                        let g = a.at(i);
                        for j in 0..k {
                            hist.raw[j] += g[j + 1];
                            hist.rebalanced[j] += a.s[j] * g[j + 1];
                        }
                        hist.taps += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Assignment histogram of malleable block `block` over one dataset split.
/// Assignments depend on depth only, so features are not evaluated.
pub fn assignment_histogram(net: &ToyNet, data: &Dataset, split: Split, block: usize) -> Result<AssignHistogram, AnalysisError> {
    let params = malleable_block(net, block)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(AnalysisError::EmptySplit(split));
    }
    let k = params.kernels();
    let mut hist = AssignHistogram {
        block,
        raw: vec![0.0; k],
        rebalanced: vec![0.0; k],
        taps: 0,
    };
    for s in samples {
        let d = net.block_depth(block, &s.depth)?;
        accumulate_assignment(&mut hist, &d, &data.camera, params)?;
    }
    Ok(hist)
}

/// Per-kernel partial outputs of a malleable block for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDump {
    pub block: usize,
    /// `K` maps `s_k * sum_p g_k * w_k * x`, each `(1, c_out, h, w)`.
    pub kernels: Vec<Tensor4>,
    pub bias: Option<Vec<f64>>,
    /// The block's convolution output (before normalization).
    pub output: Tensor4,
}

impl KernelDump {
    /// Sum of the per-kernel maps plus the bias.
    pub fn recombined(&self) -> Tensor4 {
        let mut out = self.kernels[0].clone();
        for k in &self.kernels[1..] {
            out.axpy_inplace(1.0, k).expect("same dims");
        }
        if let Some(bias) = &self.bias {
            let [n, c, h, w] = out.dims();
            for b in 0..n {
                for (ch, &bv) in bias.iter().enumerate().take(c) {
                    let o = (b * c + ch) * h * w;
                    for v in &mut out.data_mut()[o..o + h * w] {
                        *v += bv;
                    }
                }
            }
        }
        out
    }
}

/// Runs the network (eval mode) up to malleable block `block` on `sample`
/// and splits that block's convolution into its per-kernel terms.
pub fn dump_kernel_features(
    net: &ToyNet,
    sample: &SceneSample,
    camera: &CameraIntrinsics,
    block: usize,
) -> Result<KernelDump, AnalysisError> {
    let params = malleable_block(net, block)?;
    let x = net.block_input(block, &sample.features, &sample.depth, camera)?;
    let depth = net.block_depth(block, &sample.depth)?;
    let kernels = convops::malleable_kernel_outputs(&x, &depth, camera, params)?;
    let output = convops::malleable_forward(&x, &depth, camera, params)?;
    Ok(KernelDump {
        block,
        kernels,
        bias: params.bias.clone(),
        output,
    })
}

/// Writes each kernel map of `dump` as `kernel{k}.t4` under `dir`, plus the
/// block output as `output.t4`.
pub fn write_kernel_dump(dump: &KernelDump, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>, AnalysisError> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    let save = |name: String, t: &Tensor4| {
        let p = dir.join(name);
        crate::tensor::save(&p, t).map_err(|e| AnalysisError::Io {
            path: p.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        Ok::<_, AnalysisError>(p)
    };
    for (k, t) in dump.kernels.iter().enumerate() {
        written.push(save(format!("kernel{k}.t4"), t)?);
    }
    written.push(save("output.t4".into(), &dump.output)?);
    Ok(written)
}

/// Mean receptive-field width over every malleable block of `net`.
pub fn mean_rf_width(net: &ToyNet) -> f64 {
    let blocks = net.malleable_blocks();
    blocks.iter().map(|(_, r)| default_rf_width(r)).sum::<f64>() / blocks.len().max(1) as f64
}

/// Eval-mode network forward on one sample; convenience for examples.
pub fn predict(net: &ToyNet, sample: &SceneSample, camera: &CameraIntrinsics) -> Result<Tensor4, AnalysisError> {
    let mut net = net.clone();
    let (y, _) = net.forward(&sample.features, &sample.depth, camera, Mode::Eval)?;
    Ok(y)
}

/// Rebalancing factors of every malleable block.
pub fn rebalance_factors(net: &ToyNet) -> Vec<(usize, Vec<f64>)> {
    net.malleable_blocks().into_iter().map(|(i, r)| (i, rebalance(&r.b))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{LabelMap, SceneConfig};
    use crate::train::NetConfig;

    #[test]
    fn init_curve_peaks_at_zero() {
        let p = RFieldParams::init(3).unwrap();
        let t = export_rf_curves(&p, -4.0, 4.0, 801).unwrap();
        assert_eq!(t.columns[0], "d");
        assert_eq!(t.columns.len(), 11);
        let g2 = t.column("g_2").unwrap();
        let d = t.column("d").unwrap();
        let (imax, gmax) = g2.iter().enumerate().fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(d[imax], 0.0);
        assert!((gmax - 0.5642098576828567).abs() < 1e-12);
        for r in &t.rows {
            let s: f64 = r[6..].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(matches!(export_rf_curves(&p, 0.0, 1.0, 1), Err(AnalysisError::Steps(1))));
    }

    #[test]
    fn hard_profile_steps_at_half_integers() {
        let t = hard25d_profile(3, -2.0, 2.0, 9).unwrap();
        // d = -2, -1.5, ..., 2
        let expect = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ];
        for (r, e) in t.rows.iter().zip(expect) {
            assert_eq!(&r[1..], &e, "d = {}", r[0]);
        }
    }

    #[test]
    fn depthaware_width_depends_on_depth() {
        let t = depthaware_profile(8.3, &[1.0, 20.0], 500.0, 1.0, -100.0, 100.0, 20_001).unwrap();
        let width = |col: &str| t.column(col).unwrap().iter().filter(|&&v| v > 0.5).count();
        let (near, far) = (width("w_1"), width("w_20"));
        // the half-weight point sits at |d| = ln 2 * f / (alpha * z)
        let expected = 2.0 * 2f64.ln() * 500.0 / 8.3;
        assert!(((near as f64 - 1.0) * 0.01 - expected).abs() < 0.02);
        assert!(near > 15 * far);
    }

    #[test]
    fn width_of_init_field() {
        // bisection on g_0 + g_4 = 1/2 at the initial parameters
        let w = default_rf_width(&RFieldParams::init(3).unwrap());
        assert!((w - 3.115581487074371).abs() < 0.02, "{w}");
        let wide = RFieldParams::new(vec![-2.0, -1.0, 0.0, 1.0, 2.0], 4.0, vec![0.0; 3]).unwrap();
        assert!(default_rf_width(&wide) > w);
    }

    fn constant_dataset() -> Dataset {
        let (h, w) = (8, 8);
        let sample = SceneSample {
            features: Tensor4::randn([1, 3, h, w], 3).unwrap(),
            depth: DepthField::new(Tensor4::full([1, 1, h, w], 2.5).unwrap(), 1).unwrap(),
            labels: LabelMap {
                height: h,
                width: w,
                data: vec![0; h * w],
            },
        };
        Dataset {
            camera: CameraIntrinsics::new(20.0, 20.0, 4.0, 4.0).unwrap(),
            classes: 3,
            samples: vec![(Split::Train, sample.clone()), (Split::Test, sample)],
        }
    }

    #[test]
    fn histogram_on_constant_depth_is_symmetric() {
        let net = ToyNet::build(&NetConfig::default()).unwrap();
        let data = constant_dataset();
        let h = assignment_histogram(&net, &data, Split::Test, 0).unwrap();
        for (x, y) in h.raw_ratios().iter().zip(h.rebalanced_ratios()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((h.raw[0] - h.raw[2]).abs() < 1e-12);
        assert!(h.raw[1] > h.raw[0]);
        // 8x8 positions, 3x3 taps, minus the 4 * 8 * 3 - 4 * ... padded taps
        assert_eq!(h.taps, 64 * 9 - 4 * 8 * 3 + 4);
        let r: f64 = h.raw_ratios().iter().sum();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(h.rebalanced_entropy() <= 3f64.ln() + 1e-12);
    }

    #[test]
    fn histogram_rejects_other_kinds() {
        let net = ToyNet::build(&NetConfig {
            kind: LayerKind::Hard25D,
            ..NetConfig::default()
        })
        .unwrap();
        let err = assignment_histogram(&net, &constant_dataset(), Split::Test, 1).unwrap_err();
        assert!(matches!(err, AnalysisError::NotMalleable { index: 1, .. }));
        let net = ToyNet::build(&NetConfig::default()).unwrap();
        assert!(matches!(
            assignment_histogram(&net, &constant_dataset(), Split::Test, 9),
            Err(AnalysisError::NoSuchBlock { .. })
        ));
    }

    #[test]
    fn rebalancing_raises_entropy_when_it_favors_rare_kernels() {
        let mut net = ToyNet::build(&NetConfig::default()).unwrap();
        let data = Dataset::from_config(&SceneConfig {
            scenes: 5,
            ..SceneConfig::default()
        })
        .unwrap();
        if let Some(r) = net.blocks[0].conv.rfield_mut() {
            r.b = vec![1.0, -1.0, 1.0];
        }
        let h = assignment_histogram(&net, &data, Split::Train, 0).unwrap();
        assert!(h.raw_ratios()[1] > h.raw_ratios()[0]);
        assert!(h.rebalanced_entropy() > h.raw_entropy());
    }

    #[test]
    fn kernel_dumps_recombine_to_block_output() {
        let net = ToyNet::build(&NetConfig::default()).unwrap();
        let data = Dataset::from_config(&SceneConfig {
            scenes: 2,
            ..SceneConfig::default()
        })
        .unwrap();
        for block in [0, 3] {
            let d = dump_kernel_features(&net, &data.samples[0].1, &data.camera, block).unwrap();
            assert_eq!(d.kernels.len(), 3);
            assert!(d.recombined().max_abs_diff(&d.output).unwrap() < 1e-10);
        }
    }

    #[test]
    fn kernel_dumps_differ_most_on_a_depth_edge() {
        let (h, w) = (10, 10);
        let cfg = NetConfig {
            blocks: 1,
            strided: vec![],
            duplicate_banks: true,
            ..NetConfig::default()
        };
        let net = ToyNet::build(&cfg).unwrap();
        // near left half, far right half; edge between columns 4 and 5
        let depth: Vec<f64> = (0..h * w).map(|i| if i % w < 5 { 2.0 } else { 2.3 }).collect();
        let sample = SceneSample {
            features: Tensor4::full([1, 3, h, w], 1.0).unwrap(),
            depth: DepthField::new(Tensor4::from_vec([1, 1, h, w], depth).unwrap(), 1).unwrap(),
            labels: LabelMap {
                height: h,
                width: w,
                data: vec![0; h * w],
            },
        };
        let cam = CameraIntrinsics::new(10.0, 10.0, 5.0, 5.0).unwrap();
        let d = dump_kernel_features(&net, &sample, &cam, 0).unwrap();
        let diff = d.kernels[0].sub(&d.kernels[2]).unwrap().map(f64::abs);
        let (mut best, mut at) = (0.0, 0);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = diff.at(0, 0, y, x);
                if v > best {
                    best = v;
                    at = x;
                }
            }
        }
        assert!(at == 4 || at == 5, "max difference at column {at}");
        // interior columns away from the edge see no difference
        assert!(diff.at(0, 0, 5, 2) < 1e-12);
    }
}
