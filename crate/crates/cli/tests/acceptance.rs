//! Acceptance gate. Each criterion prints one PASS/FAIL line with the measured
//! value next to its pinned bound; the process exits non-zero if any fails.
//!
//! Pass criterion ids (`C1` .. `C11`) as arguments to run a subset.

use std::collections::VecDeque;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg_core::arch::detection::{detection_loss, detection_loss_head, DetectionTargets};
use volseg_core::arch::{build, build_fcn, build_hed, build_modified_hed, forward_probability, init_params, ArchName, Scale};
use volseg_core::detect::{largest_interval, reconstruct_roi_z};
use volseg_core::grad::{
    finite_difference_check, CropOffset, FdConfig, FdTarget, FuseMode, Graph, LayerKind, NodeId, ParamStore, Real,
    Tensor,
};
use volseg_core::metrics::{mean_std, overlap_report};
use volseg_core::optim::TrainConfig;
use volseg_core::phantom::{generate_phantom, make_folds, FoldPlan, Phantom, PhantomSpec};
use volseg_core::postproc::{kmeans_1d, largest_component, quantile_init, smooth_z, Connectivity};
use volseg_core::volume::{ValueKind, Volume};
use volseg_core::workflow::{run_detect_crossval, run_seg_crossval, PipelineConfig, SegCrossval};

mod bounds {
    pub const GRAD_REL_ERR: f64 = 1e-4;
    pub const FD_EPSILON: f64 = 1e-5;
    pub const GRAD_SECONDS: f64 = 60.0;
    pub const EXACT: f64 = 1e-12;
    pub const PARAM_REL: f64 = 0.01;
    pub const PARAM_SECONDS: f64 = 1.0;
    pub const LLOYD: f64 = 1e-9;
    pub const DICE_MIN: f64 = 0.80;
    pub const RVD_MAX: f64 = 0.15;
    pub const SEG_SECONDS: f64 = 30.0 * 60.0;
    pub const ORDERED_FOLDS_MIN: usize = 3;
    pub const FNR_MAX: f64 = 0.15;
    pub const DETECT_SECONDS: f64 = 15.0 * 60.0;
}

const PHANTOM_COUNT: usize = 12;
const PHANTOM_SEED: u64 = 1000;
const FOLD_SEED: u64 = 7;
const FOLDS: usize = 4;
const SEG_EPOCHS: usize = 100;
const COMPARE_EPOCHS: usize = 20;
const DETECT_EPOCHS: usize = 50;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Check = dyn Fn(&mut Desk) -> Verdict;

/// Shared state for the training criteria, built on first use.
#[derive(Default)]
struct Desk {
    data: Option<(Vec<Phantom>, FoldPlan)>,
    mhed: Option<SegCrossval>,
}

impl Desk {
    fn data(&mut self) -> &(Vec<Phantom>, FoldPlan) {
        self.data.get_or_insert_with(|| {
            let phantoms: Vec<Phantom> = (0..PHANTOM_COUNT)
                .map(|i| generate_phantom(&PhantomSpec::desk(PHANTOM_SEED + i as u64)).expect("phantom"))
                .collect();
            let ids: Vec<usize> = (0..PHANTOM_COUNT).collect();
            (phantoms, make_folds(&ids, FOLDS, FOLD_SEED).expect("folds"))
        })
    }

    fn crossval(&mut self, name: ArchName, epochs: usize) -> SegCrossval {
        let (phantoms, plan) = self.data();
        let tc = TrainConfig { epochs, ..TrainConfig::segmentation(name) };
        run_seg_crossval(phantoms, plan, name, Scale::Desk, &tc, &PipelineConfig::default(), 1).expect("cross-validation")
    }
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f.eq_ignore_ascii_case(id));
    let mut desk = Desk::default();
    let criteria: [(&str, &str, &Check); 11] = [
        ("C1", "layer gradients", &|_| c1_layer_gradients()),
        ("C2", "detection loss", &|_| c2_detection_loss()),
        ("C3", "output alignment", &|_| c3_alignment()),
        ("C4", "parameter counts", &|_| c4_param_counts()),
        ("C5", "metric oracle", &|_| c5_metrics()),
        ("C6", "post-processing oracles", &|_| c6_postproc()),
        ("C7", "slice-run regions", &|_| c7_roi_rule()),
        ("C8", "MODIFIED_HED cross-validation", &c8_segmentation),
        ("C9", "architecture ordering", &c9_ordering),
        ("C10", "detector cross-validation", &c10_detection),
        ("C11", "manifest replay", &|_| c11_replay()),
    ];
    let mut failed = 0;
    for (id, title, check) in criteria {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| check(&mut desk)))
            .unwrap_or_else(|e| verdict(false, format!("panicked: {}", panic_text(&e))));
        let secs = start.elapsed().as_secs_f64();
        println!("{} {id} {title}: {} [{secs:.1}s wall]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

/// CPU seconds used by this process, from `/proc/self/stat`; wall-clock
/// seconds where that is unavailable.
struct CpuClock {
    wall: Instant,
    cpu: Option<f64>,
}

impl CpuClock {
    fn start() -> Self {
        Self { wall: Instant::now(), cpu: process_cpu_seconds() }
    }

    fn seconds(&self) -> f64 {
        match (self.cpu, process_cpu_seconds()) {
            (Some(a), Some(b)) => b - a,
            _ => self.wall.elapsed().as_secs_f64(),
        }
    }
}

fn process_cpu_seconds() -> Option<f64> {
    let stat = fs::read_to_string("/proc/self/stat").ok()?;
    // Fields after the parenthesised command name start at `state` (field 3);
    // utime and stime are fields 14 and 15, in 1/100 s ticks.
    let fields: Vec<&str> = stat.rsplit_once(')')?.1.split_whitespace().collect();
    let ticks = fields.get(11)?.parse::<f64>().ok()? + fields.get(12)?.parse::<f64>().ok()?;
    Some(ticks / 100.0)
}

// ---------------------------------------------------------------- C1

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Shuffled ramp with spacing 0.1 and small jitter: no two values within 0.05.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let data = idx.into_iter().map(|v| (v as Real - n as Real / 2.0) * 0.1 + rng.gen_range(-0.02..0.02)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Magnitudes in [0.1, 1) with random sign.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: Real = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

struct Case {
    name: &'static str,
    graph: Graph,
    feeds: Vec<(NodeId, Tensor)>,
    output: NodeId,
    targets: Vec<FdTarget>,
}

fn single(kind: LayerKind, channels: usize, name: &'static str) -> (Graph, NodeId, NodeId) {
    let mut g = Graph::new();
    let x = g.add("x", LayerKind::Input { channels }, &[]);
    let y = g.add(name, kind, &[x]);
    (g, x, y)
}

fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();

    let conv = LayerKind::Conv2d { in_channels: 4, out_channels: 3, kernel: 3, stride: 1, padding: 1, bias: true };
    let (g, x, y) = single(conv, 4, "conv");
    let targets = vec![FdTarget::Param("conv.weight".into()), FdTarget::Param("conv.bias".into()), FdTarget::Input(x)];
    cases.push(Case { name: "conv2d", feeds: vec![(x, uniform(&[1, 4, 16, 16], rng))], graph: g, output: y, targets });

    let deconv = LayerKind::TransposedConv2d { in_channels: 4, out_channels: 2, kernel: 4, stride: 2, padding: 1 };
    let (g, x, y) = single(deconv, 4, "up");
    let targets = vec![FdTarget::Param("up.weight".into()), FdTarget::Input(x)];
    cases.push(Case { name: "transposed_conv2d", feeds: vec![(x, uniform(&[1, 4, 8, 8], rng))], graph: g, output: y, targets });

    let (g, x, y) = single(LayerKind::MaxPool2d { window: 2, stride: 2, ceil_mode: true }, 4, "pool");
    cases.push(Case {
        name: "maxpool2d",
        feeds: vec![(x, separated(&[1, 4, 15, 16], rng))],
        graph: g,
        output: y,
        targets: vec![FdTarget::Input(x)],
    });

    let (g, x, y) = single(LayerKind::Relu, 4, "relu");
    cases.push(Case {
        name: "relu",
        feeds: vec![(x, off_kink(&[1, 4, 16, 16], rng))],
        graph: g,
        output: y,
        targets: vec![FdTarget::Input(x)],
    });

    let mut g = Graph::new();
    let big = g.add("big", LayerKind::Input { channels: 4 }, &[]);
    let reference = g.add("ref", LayerKind::Input { channels: 1 }, &[]);
    let y = g.add("crop", LayerKind::CropAlign { offset: CropOffset::Fixed(1) }, &[big, reference]);
    cases.push(Case {
        name: "crop_align",
        feeds: vec![(big, uniform(&[1, 4, 16, 16], rng)), (reference, Tensor::zeros(&[1, 1, 13, 11]))],
        graph: g,
        output: y,
        targets: vec![FdTarget::Input(big)],
    });

    let mut g = Graph::new();
    let a = g.add("a", LayerKind::Input { channels: 4 }, &[]);
    let b = g.add("b", LayerKind::Input { channels: 4 }, &[]);
    let y = g.add("fuse", LayerKind::Fuse { mode: FuseMode::EltwiseMax }, &[a, b]);
    let both = separated(&[2, 4, 16, 16], rng);
    let half = both.len() / 2;
    cases.push(Case {
        name: "fuse/eltwise_max",
        feeds: vec![
            (a, Tensor::new(&[1, 4, 16, 16], both.data()[..half].to_vec()).unwrap()),
            (b, Tensor::new(&[1, 4, 16, 16], both.data()[half..].to_vec()).unwrap()),
        ],
        graph: g,
        output: y,
        targets: vec![FdTarget::Input(a), FdTarget::Input(b)],
    });

    let mut g = Graph::new();
    let s = g.add("scores", LayerKind::Input { channels: 4 }, &[]);
    let l = g.add("labels", LayerKind::Labels, &[]);
    let y = g.add("loss", LayerKind::SoftmaxLoss, &[s, l]);
    let labels = Tensor::new(&[1, 16, 16], (0..256).map(|_| rng.gen_range(0..4) as Real).collect()).unwrap();
    cases.push(Case {
        name: "softmax_multinomial_loss",
        feeds: vec![(s, uniform(&[1, 4, 16, 16], rng)), (l, labels)],
        graph: g,
        output: y,
        targets: vec![FdTarget::Input(s)],
    });
    cases
}

fn c1_layer_gradients() -> Verdict {
    let start = CpuClock::start();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: (f64, String) = (0.0, String::new());
    for case in gradient_cases(&mut rng) {
        let params = ParamStore::init(&case.graph, 31);
        for (k, target) in case.targets.iter().enumerate() {
            let cfg = FdConfig { epsilon: bounds::FD_EPSILON, max_entries: 512, seed: 40 + k as u64 };
            let err = finite_difference_check(&case.graph, &params, &case.feeds, case.output, target, cfg)
                .expect("finite difference check");
            if err >= worst.0 {
                worst = (err, format!("{} {target:?}", case.name));
            }
        }
    }
    let secs = start.seconds();
    verdict(
        worst.0 <= bounds::GRAD_REL_ERR && secs < bounds::GRAD_SECONDS,
        format!(
            "7 layer kinds, max relative error {:.2e} at {} (bound {:e}), {secs:.1} CPU s (bound {}s)",
            worst.0,
            worst.1,
            bounds::GRAD_REL_ERR,
            bounds::GRAD_SECONDS
        ),
    )
}

// ---------------------------------------------------------------- C2

fn c2_detection_loss() -> Verdict {
    let mut truth = DetectionTargets::empty(1, 4, 16);
    let mut pred = truth.clone();
    truth.coverage[0] = 1.0;
    truth.corner1[0] = [2.0, 2.0];
    truth.corner2[0] = [10.0, 10.0];
    pred.coverage[0] = 0.5;
    pred.corner1[0] = [3.0, 2.0];
    pred.corner2[0] = [10.0, 12.0];
    let example = detection_loss(&truth, &pred).expect("loss").value;
    let zero = detection_loss(&truth, &truth).expect("loss").value;

    // Random grids; predicted corners kept at least 0.05 cell units from
    // their targets so every L1 term is differentiable at the probe point.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (n, gh, gw, cell) = (3usize, 3usize, 4usize, 16usize);
    let plane = gh * gw;
    let truths: Vec<DetectionTargets> = (0..n)
        .map(|_| {
            let mut t = DetectionTargets::empty(gh, gw, cell);
            for i in 0..plane {
                if rng.gen_bool(0.6) {
                    t.coverage[i] = 1.0;
                    t.corner1[i] = [rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)];
                    t.corner2[i] = [rng.gen_range(8.0..16.0), rng.gen_range(8.0..16.0)];
                }
            }
            t
        })
        .collect();
    let mut data = vec![0.0; n * 5 * plane];
    for (item, truth) in truths.iter().enumerate() {
        for c in 0..5 {
            for i in 0..plane {
                let idx = (item * 5 + c) * plane + i;
                data[idx] = if c == 0 {
                    rng.gen_range(0.0..1.0)
                } else {
                    let target = match c {
                        1 => truth.corner1[i][0],
                        2 => truth.corner1[i][1],
                        3 => truth.corner2[i][0],
                        _ => truth.corner2[i][1],
                    } / cell as Real;
                    let offset: Real = rng.gen_range(0.05..0.5);
                    if rng.gen_bool(0.5) {
                        target + offset
                    } else {
                        target - offset
                    }
                };
            }
        }
    }
    let shape = [n, 5, gh, gw];
    let loss_at = |d: Vec<Real>| detection_loss_head(&Tensor::new(&shape, d).unwrap(), &truths).unwrap().0;
    let (_, grad) = detection_loss_head(&Tensor::new(&shape, data.clone()).unwrap(), &truths).unwrap();
    let eps = bounds::FD_EPSILON;
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        let mut plus = data.clone();
        plus[i] += eps;
        let mut minus = data.clone();
        minus[i] -= eps;
        let numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * eps);
        let analytic = grad.data()[i];
        worst = worst.max((analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8));
    }
    let pass = (example - 0.40625).abs() <= bounds::EXACT && zero.abs() <= bounds::EXACT && worst <= bounds::GRAD_REL_ERR;
    verdict(
        pass,
        format!(
            "example {example} (expected 0.40625), zero case {zero}, tol {:e}; gradient max relative error {worst:.2e} over {} entries (bound {:e})",
            bounds::EXACT,
            data.len(),
            bounds::GRAD_REL_ERR
        ),
    )
}

// ---------------------------------------------------------------- C3

fn c3_alignment() -> Verdict {
    let mut bad = Vec::new();
    let mut checked = 0;
    for name in ArchName::SEGMENTATION {
        let net = build(name, Scale::Desk, 2).expect("build");
        for side in [64usize, 96, 128, 256] {
            let shapes = net.graph.infer_shapes((side, side)).expect("shapes");
            match shapes[net.output.0] {
                Some((_, h, w)) if (h, w) == (side, side) => {}
                other => bad.push(format!("{name}@{side}: {other:?}")),
            }
            checked += 1;
        }
        // One real forward pass per network at the smallest size.
        let params = init_params(&net, 1);
        let input = Tensor::new(&[1, 1, 64, 64], (0..64 * 64).map(|i| (i % 17) as Real / 17.0).collect()).unwrap();
        let prob = forward_probability(&net, &params, &input).expect("forward");
        if prob.shape()[prob.shape().len() - 2..] != [64, 64] {
            bad.push(format!("{name} forward: {:?}", prob.shape()));
        }
    }
    verdict(bad.is_empty(), format!("{checked} network/size pairs aligned; mismatches: {bad:?}"))
}

// ---------------------------------------------------------------- C4

fn c4_param_counts() -> Verdict {
    let start = CpuClock::start();
    let hed = build_hed(Scale::Full, 2).expect("hed").param_count();
    let mhed = build_modified_hed(Scale::Full, 2).expect("mhed").param_count();
    let fcn46 = build_fcn(46, Scale::Full, 2).expect("fcn46").param_count();
    let secs = start.seconds();
    let within = |got: usize, want: usize| (got as f64 - want as f64).abs() / want as f64 <= bounds::PARAM_REL;
    let pass = within(hed, 14_717_541) && within(mhed, 14_717_322) && within(fcn46, 134_702_069) && mhed < hed
        && secs < bounds::PARAM_SECONDS;
    verdict(
        pass,
        format!(
            "HED {hed} vs 14717541, MODIFIED_HED {mhed} vs 14717322, FCN46 {fcn46} vs 134702069 (rel bound {}), {secs:.3} CPU s",
            bounds::PARAM_REL
        ),
    )
}

// ---------------------------------------------------------------- C5

fn c5_metrics() -> Verdict {
    let ext = [16usize; 3];
    let n: usize = ext.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..500 {
        let (ps, pt) = (rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6));
        let s: Vec<bool> = (0..n).map(|_| rng.gen_bool(ps)).collect();
        let t: Vec<bool> = (0..n).map(|_| rng.gen_bool(pt)).collect();
        let vol = |b: &[bool]| Volume::new(ext, [1.0; 3], b.iter().map(|&v| v as u8 as f64).collect(), ValueKind::Mask).unwrap();
        let r = overlap_report(&vol(&s), &vol(&t)).expect("metrics");
        // Brute force: explicit index sets.
        let sset: Vec<usize> = (0..n).filter(|&i| s[i]).collect();
        let tset: std::collections::HashSet<usize> = (0..n).filter(|&i| t[i]).collect();
        let inter = sset.iter().filter(|i| tset.contains(i)).count();
        let (ns, nt, ni) = (sset.len() as f64, tset.len() as f64, inter as f64);
        let want = [ni / nt, ni / (ns + nt - ni), 2.0 * ni / (ns + nt), (nt - ni) / nt, (ns - ni) / ns, (ns - nt).abs() / nt];
        let tallies_match = (r.source_voxels, r.truth_voxels, r.intersection_voxels) == (sset.len(), tset.len(), inter);
        if !tallies_match || r.values() != want {
            mismatches += 1;
        }
        worst_identity = worst_identity.max((r.dice - 2.0 * r.jaccard / (1.0 + r.jaccard)).abs());
    }
    let anchor: f64 = 2.0 * 0.70 / 1.70;
    let pass = mismatches == 0 && worst_identity <= bounds::EXACT && (anchor - 0.8235).abs() < 5e-5;
    verdict(
        pass,
        format!(
            "500 pairs, {mismatches} mismatches; max |dice - 2J/(1+J)| {worst_identity:.1e} (bound {:e}); J=0.70 gives D={anchor:.4}",
            bounds::EXACT
        ),
    )
}

// ---------------------------------------------------------------- C6

/// Plain Lloyd iteration from the given centroids; ties to the lower index.
fn lloyd(values: &[f64], mut c: Vec<f64>, max_iters: usize) -> (Vec<f64>, f64) {
    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..max_iters {
        let next: Vec<usize> = values
            .iter()
            .map(|v| (0..c.len()).fold(0, |best, j| if (v - c[j]).abs() < (v - c[best]).abs() { j } else { best }))
            .collect();
        let stable = next == assign;
        assign = next;
        for (j, cj) in c.iter_mut().enumerate() {
            let (sum, count) = values.iter().zip(&assign).filter(|(_, &a)| a == j).fold((0.0, 0), |(s, n), (v, _)| (s + v, n + 1));
            if count > 0 {
                *cj = sum / count as f64;
            }
        }
        if stable {
            break;
        }
    }
    let objective = values.iter().zip(&assign).map(|(v, &a)| (v - c[a]).powi(2)).sum();
    c.sort_by(f64::total_cmp);
    (c, objective)
}

/// Breadth-first flood fill; largest component, ties to the one reached first
/// in scan order.
fn flood_fill_largest(mask: &[bool], [nx, ny, nz]: [usize; 3], full: bool) -> Vec<bool> {
    let mut label = vec![0usize; mask.len()];
    let mut sizes = vec![0usize];
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        label[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            sizes[id] += 1;
            let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let m = dx.abs() + dy.abs() + dz.abs();
                        if m == 0 || (!full && m > 1) {
                            continue;
                        }
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let j = a as usize + nx * (b as usize + ny * c as usize);
                        if mask[j] && label[j] == 0 {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    let best = (1..sizes.len()).fold(0, |best, id| if sizes[id] > sizes[best] { id } else { best });
    label.iter().map(|&l| l != 0 && l == best).collect()
}

fn c6_postproc() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut kmeans_err: f64 = 0.0;
    for _ in 0..5 {
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0f64..1.0).powi(2)).collect();
        let km = kmeans_1d(&values, 6, 300).expect("kmeans");
        let (c, objective) = lloyd(&values, quantile_init(&values, 6), 300);
        kmeans_err = kmeans_err.max((km.objective.last().unwrap() - objective).abs());
        for (a, b) in km.centroids.iter().zip(&c) {
            kmeans_err = kmeans_err.max((a - b).abs());
        }
    }

    let ext = [32usize; 3];
    let n: usize = ext.iter().product();
    let mut component_mismatches = 0;
    for k in 0..200 {
        let density = rng.gen_range(0.05..0.35);
        let fg: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let vol = Volume::new(ext, [1.0; 3], fg.iter().map(|&b| b as u8 as f64).collect(), ValueKind::Mask).unwrap();
        let (conn, full) = if k % 2 == 0 { (Connectivity::TwentySix, true) } else { (Connectivity::Six, false) };
        let got: Vec<bool> = largest_component(&vol, conn).voxels().iter().map(|&v| v == 1.0).collect();
        if got != flood_fill_largest(&fg, ext, full) {
            component_mismatches += 1;
        }
    }

    let mut smooth_err: f64 = 0.0;
    for c in [0.0, 0.37, 1.0] {
        let v = Volume::new([5, 4, 23], [1.0; 3], vec![c; 5 * 4 * 23], ValueKind::Probability).unwrap();
        smooth_err = smooth_z(&v).voxels().iter().fold(smooth_err, |m, x| m.max((x - c).abs()));
    }
    let pass = kmeans_err <= bounds::LLOYD && component_mismatches == 0 && smooth_err <= bounds::EXACT;
    verdict(
        pass,
        format!(
            "k-means vs Lloyd max diff {kmeans_err:.1e} (bound {:e}); largest component {component_mismatches}/200 mismatches; smoothing constant error {smooth_err:.1e} (bound {:e})",
            bounds::LLOYD,
            bounds::EXACT
        ),
    )
}

// ---------------------------------------------------------------- C7

/// Close gaps shorter than `run` between candidates, then keep closed runs
/// spanning at least `run` slices.
fn gap_closed_runs(bits: &[bool], run: usize) -> Vec<(usize, usize)> {
    let trues: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for &z in &trues {
        match groups.last_mut() {
            Some(g) if z - g.1 - 1 < run => g.1 = z,
            _ => groups.push((z, z)),
        }
    }
    groups.into_iter().filter(|&(a, b)| b - a + 1 >= run).collect()
}

fn roi_violations(bits: &[bool], run: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let rois = reconstruct_roi_z(bits, run);
    let mut v = Vec::new();
    if rois != gap_closed_runs(bits, run) {
        v.push(format!("oracle mismatch {rois:?}"));
    }
    for (k, &(a, b)) in rois.iter().enumerate() {
        if !(a <= b && b < bits.len() && b - a + 1 >= run && bits[a] && bits[b]) {
            v.push(format!("bad interval ({a},{b})"));
        }
        if k > 0 && a <= rois[k - 1].1 + run {
            v.push(format!("intervals {:?} and ({a},{b}) not separated", rois[k - 1]));
        }
    }
    // Gap insertion between two adjacent candidates inside a region.
    for &(a, b) in &rois {
        let joints: Vec<usize> = (a + 1..=b).filter(|&z| bits[z - 1] && bits[z]).collect();
        if joints.is_empty() {
            continue;
        }
        let p = joints[rng.gen_range(0..joints.len())];
        for k in [run - 1, run, run + rng.gen_range(0..5)] {
            if k == 0 {
                continue;
            }
            let mut edited = bits.to_vec();
            edited.splice(p..p, std::iter::repeat_n(false, k));
            let after = reconstruct_roi_z(&edited, run);
            let spans = after.iter().any(|&(s, e)| s < p && e >= p + k);
            if k < run && !spans {
                v.push(format!("gap of {k} at {p} split ({a},{b})"));
            }
            if k >= run && spans {
                v.push(format!("gap of {k} at {p} did not split ({a},{b})"));
            }
        }
    }
    v
}

fn c7_roi_rule() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for case in 0..10_000 {
        let len = rng.gen_range(0..=200);
        let run = if case % 2 == 0 { 10 } else { rng.gen_range(1..=15) };
        let density = rng.gen_range(0.2..0.95);
        let bits: Vec<bool> = (0..len).map(|_| rng.gen_bool(density)).collect();
        for f in roi_violations(&bits, run, &mut rng) {
            failures.push(format!("case {case}: {f}"));
        }
    }
    let mut gap = vec![false; 40];
    (5..=30).filter(|&z| z != 12).for_each(|z| gap[z] = true);
    let mut short = vec![false; 30];
    short[..9].fill(true);
    let mut two = vec![false; 60];
    two[..20].fill(true);
    two[40..].fill(true);
    let two_rois = reconstruct_roi_z(&two, 10);
    let examples = [
        reconstruct_roi_z(&gap, 10) == [(5, 30)],
        reconstruct_roi_z(&short, 10).is_empty(),
        two_rois == [(0, 19), (40, 59)] && largest_interval(&two_rois) == Some((0, 19)),
    ];
    let passed = examples.iter().filter(|&&e| e).count();
    verdict(
        failures.is_empty() && passed == 3,
        format!(
            "10000 sequences, {} invariant violations{}; worked examples {passed}/3",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- C8 - C10

fn c8_segmentation(desk: &mut Desk) -> Verdict {
    desk.data();
    let start = CpuClock::start();
    let cv = desk.crossval(ArchName::ModifiedHed, SEG_EPOCHS);
    let secs = start.seconds();
    let agg = cv.aggregate().expect("aggregate");
    let pass = !cv.partial()
        && agg.dice.mean >= bounds::DICE_MIN
        && agg.relative_volume_diff.mean <= bounds::RVD_MAX
        && secs <= bounds::SEG_SECONDS;
    let detail = format!(
        "{} test volumes, Dice {:.4} ± {:.4} (min {}), RVD {:.4} ± {:.4} (max {}), {:.1} CPU min (max {})",
        agg.count,
        agg.dice.mean,
        agg.dice.std,
        bounds::DICE_MIN,
        agg.relative_volume_diff.mean,
        agg.relative_volume_diff.std,
        bounds::RVD_MAX,
        secs / 60.0,
        bounds::SEG_SECONDS / 60.0
    );
    desk.mhed = Some(cv);
    verdict(pass, detail)
}

fn c9_ordering(desk: &mut Desk) -> Verdict {
    let mhed = match desk.mhed.take() {
        Some(cv) if COMPARE_EPOCHS == SEG_EPOCHS => cv,
        _ => desk.crossval(ArchName::ModifiedHed, COMPARE_EPOCHS),
    };
    let others: Vec<SegCrossval> = [ArchName::Hed, ArchName::Fcn46, ArchName::Fcn26, ArchName::Fcn14]
        .into_iter()
        .map(|name| desk.crossval(name, COMPARE_EPOCHS))
        .collect();
    let fold_dice = |cv: &SegCrossval, f: usize| cv.fold_aggregate(f).map(|a| a.dice.mean).unwrap_or(f64::NAN);
    let mut ordered = 0;
    let mut rows = Vec::new();
    for f in 0..FOLDS {
        let [m, h, f46, f26, f14] =
            [fold_dice(&mhed, f), fold_dice(&others[0], f), fold_dice(&others[1], f), fold_dice(&others[2], f), fold_dice(&others[3], f)];
        let ok = m >= h && h >= f46 && f46 >= f26.max(f14);
        ordered += usize::from(ok);
        rows.push(format!("fold {f} [{m:.3} {h:.3} {f46:.3} {f26:.3} {f14:.3}]{}", if ok { "" } else { "*" }));
    }
    let overall: Vec<String> = std::iter::once(&mhed)
        .chain(&others)
        .map(|cv| format!("{} {:.3}", cv.arch, cv.aggregate().map(|a| a.dice.mean).unwrap_or(f64::NAN)))
        .collect();
    verdict(
        ordered >= bounds::ORDERED_FOLDS_MIN,
        format!(
            "ordering held in {ordered}/{FOLDS} folds (min {}); Dice MODIFIED_HED HED FCN46 FCN26 FCN14 per fold: {}; overall: {}",
            bounds::ORDERED_FOLDS_MIN,
            rows.join(", "),
            overall.join(", ")
        ),
    )
}

fn c10_detection(desk: &mut Desk) -> Verdict {
    let (phantoms, plan) = desk.data();
    let start = CpuClock::start();
    let tc = TrainConfig { epochs: DETECT_EPOCHS, ..TrainConfig::detection() };
    let outcomes = run_detect_crossval(phantoms, plan, Scale::Desk, &tc, &PipelineConfig::default(), 1).expect("detector");
    let secs = start.seconds();
    let fnrs: Vec<f64> = outcomes.iter().flat_map(|o| o.results.iter().map(|e| e.fnr)).collect();
    let failed = outcomes.iter().filter(|o| o.failure.is_some()).count();
    let ms = mean_std(&fnrs);
    verdict(
        failed == 0 && fnrs.len() == PHANTOM_COUNT && ms.mean <= bounds::FNR_MAX && secs <= bounds::DETECT_SECONDS,
        format!(
            "{} test volumes, {DETECT_EPOCHS} epochs, slice FNR {:.4} ± {:.4} (max {}), {:.1} CPU min (max {})",
            fnrs.len(),
            ms.mean,
            ms.std,
            bounds::FNR_MAX,
            secs / 60.0,
            bounds::DETECT_SECONDS / 60.0
        ),
    )
}

// ---------------------------------------------------------------- C11

fn volseg(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("volseg {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir`, relative, except the manifest itself.
fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c11_replay() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let runs: [(&str, Vec<&str>); 9] = [
        ("data", vec!["gen-phantom", "--count", "4", "--seed", "5"]),
        ("det", vec!["train-detect", "--data", "data", "--epochs", "2"]),
        ("seg", vec!["train-seg", "--data", "data", "--epochs", "2"]),
        ("d0", vec!["detect", "--volume", "data/phantom_00_image.mhd", "--detector", "det/detector.ckpt"]),
        ("s0", vec!["segment", "--volume", "data/phantom_00_image.mhd", "--segmenter", "seg/segmenter.ckpt", "--roi", "d0/roi.json"]),
        ("p0", vec!["postproc", "--probability", "s0/probability.mhd", "--roi", "d0/roi.json"]),
        (
            "e0",
            vec![
                "evaluate", "--mask", "p0/mask.mhd", "--truth", "data/phantom_00_mask.mhd", "--observers",
                "data/phantom_00_observers.json", "--detection", "d0/detection.json",
            ],
        ),
        ("cv", vec!["crossval", "--data", "data", "--folds", "2", "--epochs", "1"]),
        (
            "x0",
            vec![
                "end2end", "--volume", "data/phantom_00_image.mhd", "--detector", "det/detector.ckpt", "--segmenter",
                "seg/segmenter.ckpt", "--truth", "data/phantom_00_mask.mhd", "--overlay",
            ],
        ),
    ];
    let mut problems = Vec::new();
    let mut compared = 0;
    for (out, args) in &runs {
        let mut args = args.clone();
        args.extend(["--out", out]);
        if let Err(e) = volseg(dir, &args) {
            problems.push(e);
            break;
        }
        let again = format!("{out}_replay");
        let manifest = format!("{out}/manifest.json");
        if let Err(e) = volseg(dir, &["replay", "--manifest", &manifest, "--out", &again]) {
            problems.push(e);
            continue;
        }
        let (first, second) = (dir.join(out), dir.join(&again));
        let files = files_under(&first);
        if files != files_under(&second) {
            problems.push(format!("{out}: different file sets"));
        }
        for f in &files {
            compared += 1;
            if fs::read(first.join(f)).ok() != fs::read(second.join(f)).ok() {
                problems.push(format!("{out}/{} differs", f.display()));
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!("{} commands replayed, {compared} files compared byte for byte; problems: {problems:?}", runs.len()),
    )
}
