use volseg_core::postproc::{
    binarize_clusters, kmeans_1d, largest_component, postprocess, quantile_init, smooth_z, BinarizePolicy,
    Connectivity, PostprocConfig,
};
use volseg_core::volume::{ValueKind, Volume};

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Textbook Lloyd iteration from given centroids; ties to the lower index.
fn lloyd(values: &[f64], mut c: Vec<f64>, max_iters: usize) -> (Vec<f64>, f64) {
    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..max_iters {
        let next: Vec<usize> = values
            .iter()
            .map(|v| {
                let mut best = 0;
                for j in 1..c.len() {
                    if (v - c[j]).abs() < (v - c[best]).abs() {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let stable = next == assign;
        assign = next;
        for (j, cj) in c.iter_mut().enumerate() {
            let members: Vec<f64> = values.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(v, _)| *v).collect();
            if !members.is_empty() {
                *cj = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if stable {
            break;
        }
    }
    let obj = values.iter().zip(&assign).map(|(v, &a)| (v - c[a]).powi(2)).sum();
    (c, obj)
}

#[test]
fn kmeans_matches_independent_lloyd() {
    for seed in 0..5 {
        let mut r = lcg(seed);
        let values: Vec<f64> = (0..1000).map(|_| r().powi(2)).collect();
        let km = kmeans_1d(&values, 6, 300).unwrap();
        let (mut c, obj) = lloyd(&values, quantile_init(&values, 6), 300);
        c.sort_by(f64::total_cmp);
        assert!((km.objective.last().unwrap() - obj).abs() <= 1e-9, "seed {seed}");
        for (a, b) in km.centroids.iter().zip(&c) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn kmeans_objective_never_increases_and_assignment_is_nearest() {
    let mut r = lcg(77);
    let values: Vec<f64> = (0..2000).map(|_| if r() < 0.8 { r() * 0.05 } else { 0.9 + r() * 0.1 }).collect();
    let km = kmeans_1d(&values, 6, 100).unwrap();
    for w in km.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    for (v, &a) in values.iter().zip(&km.assignment) {
        let d = (v - km.centroids[a]).abs();
        assert!(km.centroids.iter().all(|c| d <= (v - c).abs() + 1e-15));
    }
    assert!(km.centroids.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn kmeans_small_examples() {
    let km = kmeans_1d(&[0.0, 0.0, 1.0, 1.0], 2, 10).unwrap();
    assert_eq!(km.centroids, vec![0.0, 1.0]);
    assert_eq!(km.assignment, vec![0, 0, 1, 1]);
    let again = kmeans_1d(&[0.0, 0.0, 1.0, 1.0], 2, 10).unwrap();
    assert_eq!(km, again);

    let few = kmeans_1d(&[0.2, 0.2, 0.7], 6, 10).unwrap();
    assert_eq!(few.centroids.len(), 2);
    assert_eq!(few.warnings.len(), 1);
}

#[test]
fn binarization_policies() {
    let a = [0, 1, 1, 0];
    assert_eq!(
        binarize_clusters(&a, &[0.1, 0.9], BinarizePolicy::DropLowest),
        binarize_clusters(&a, &[0.1, 0.9], BinarizePolicy::KeepHighest)
    );
    let a = [0, 1, 2];
    assert_eq!(binarize_clusters(&a, &[0.1, 0.5, 0.9], BinarizePolicy::DropLowest), vec![false, true, true]);
    assert_eq!(binarize_clusters(&a, &[0.1, 0.5, 0.9], BinarizePolicy::KeepHighest), vec![false, false, true]);

    let flat = kmeans_1d(&[0.4; 10], 6, 10).unwrap();
    assert_eq!(flat.centroids.len(), 1);
    assert!(binarize_clusters(&flat.assignment, &flat.centroids, BinarizePolicy::DropLowest).iter().all(|&b| b));
}

fn prob_volume(extents: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume {
    let [nx, ny, nz] = extents;
    let mut v = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                v.push(f(x, y, z));
            }
        }
    }
    Volume::new(extents, [1.0; 3], v, ValueKind::Probability).unwrap()
}

#[test]
fn smoothing_preserves_constants() {
    let v = prob_volume([3, 2, 9], |_, _, _| 0.37);
    let s = smooth_z(&v);
    assert!(s.voxels().iter().all(|&x| (x - 0.37).abs() < 1e-12));
    let single = prob_volume([4, 4, 1], |x, y, _| (x * 4 + y) as f64 / 16.0);
    assert_eq!(smooth_z(&single).voxels(), single.voxels());
}

#[test]
fn impulse_becomes_a_symmetric_gaussian() {
    let k = 15;
    let v = prob_volume([1, 1, 31], |_, _, z| (z == k) as u8 as f64);
    let s = smooth_z(&v);
    let norm: f64 = (-6i32..=6).map(|d| (-(d * d) as f64 / 8.0).exp()).sum();
    for d in 0..=6usize {
        let want = (-((d * d) as f64) / 8.0).exp() / norm;
        assert!((s.get(0, 0, k + d) - want).abs() < 1e-12);
        assert_eq!(s.get(0, 0, k + d), s.get(0, 0, k - d));
    }
    assert_eq!(s.get(0, 0, k + 7), 0.0);
}

#[test]
fn smoothing_preserves_the_mean_of_periodic_profiles() {
    // Away from the borders the kernel sums to one, so a profile periodic
    // over the support keeps its mean on interior slices.
    let period = 4;
    let v = prob_volume([1, 1, 60], |_, _, z| [0.1, 0.6, 0.9, 0.2][z % period]);
    let s = smooth_z(&v);
    let interior: Vec<f64> = (20..40).map(|z| s.get(0, 0, z)).collect();
    let mean = interior.iter().sum::<f64>() / interior.len() as f64;
    assert!((mean - 0.45).abs() < 1e-12, "{mean}");
}

/// Union-find labelling; the largest component wins, ties to the component
/// holding the earliest voxel in scan order.
fn union_find_largest(mask: &[bool], [nx, ny, nz]: [usize; 3], full: bool) -> Vec<bool> {
    fn find(p: &mut Vec<usize>, mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                for dz in -1i32..=1 {
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let m = dx.abs() + dy.abs() + dz.abs();
                            if m == 0 || (!full && m != 1) {
                                continue;
                            }
                            let (a, b, c) = (x as i32 + dx, y as i32 + dy, z as i32 + dz);
                            if a < 0 || b < 0 || c < 0 || a >= nx as i32 || b >= ny as i32 || c >= nz as i32 {
                                continue;
                            }
                            let j = idx(a as usize, b as usize, c as usize);
                            if mask[j] {
                                let (ri, rj) = (find(&mut parent, idx(x, y, z)), find(&mut parent, j));
                                if ri != rj {
                                    parent[ri.max(rj)] = ri.min(rj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; mask.len()];
    for i in 0..mask.len() {
        if mask[i] {
            let r = find(&mut parent, i);
            size[r] += 1;
        }
    }
    // Roots are the smallest index of their component.
    let best = (0..mask.len()).filter(|&i| mask[i] && size[i] > 0).max_by(|&a, &b| size[a].cmp(&size[b]).then(b.cmp(&a)));
    (0..mask.len()).map(|i| mask[i] && Some(find(&mut parent, i)) == best).collect()
}

#[test]
fn largest_component_matches_union_find() {
    let ext = [12, 10, 8];
    for seed in 0..40 {
        let mut r = lcg(seed);
        let density = 0.15 + 0.2 * r();
        let fg: Vec<bool> = (0..ext.iter().product::<usize>()).map(|_| r() < density).collect();
        let vol = Volume::new(ext, [1.0; 3], fg.iter().map(|&b| b as u8 as f64).collect(), ValueKind::Mask).unwrap();
        for (conn, full) in [(Connectivity::Six, false), (Connectivity::TwentySix, true)] {
            let got: Vec<bool> = largest_component(&vol, conn).voxels().iter().map(|&v| v == 1.0).collect();
            assert_eq!(got, union_find_largest(&fg, ext, full), "seed {seed}");
        }
    }
}

#[test]
fn component_examples() {
    let mut m = Volume::zeros([20, 3, 3], [1.0; 3], ValueKind::Mask);
    for x in 0..10 {
        m.set(x, 1, 1, 1.0);
    }
    for x in 14..17 {
        m.set(x, 1, 1, 1.0);
    }
    let out = largest_component(&m, Connectivity::TwentySix);
    assert_eq!(out.count_foreground(), 10);
    assert_eq!(out.get(15, 1, 1), 0.0);

    let mut d = Volume::zeros([2, 2, 2], [1.0; 3], ValueKind::Mask);
    d.set(0, 0, 0, 1.0);
    d.set(1, 1, 1, 1.0);
    assert_eq!(largest_component(&d, Connectivity::TwentySix).count_foreground(), 2);
    let six = largest_component(&d, Connectivity::Six);
    assert_eq!(six.count_foreground(), 1);
    assert_eq!(six.get(0, 0, 0), 1.0, "tie goes to the earliest voxel");

    let empty = Volume::zeros([3, 3, 3], [1.0; 3], ValueKind::Mask);
    assert_eq!(largest_component(&empty, Connectivity::Six).count_foreground(), 0);
}

#[test]
fn chain_is_deterministic_and_rejects_masks() {
    let v = prob_volume([16, 16, 12], |x, y, z| {
        let r = ((x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2)).sqrt();
        if (3.0..6.0).contains(&r) && (2..10).contains(&z) {
            0.9
        } else {
            0.02 * ((x + y + z) % 3) as f64
        }
    });
    let cfg = PostprocConfig::default();
    let a = postprocess(&v, &cfg).unwrap();
    let b = postprocess(&v, &cfg).unwrap();
    assert_eq!(a.voxels(), b.voxels());
    assert!(a.count_foreground() > 0);
    let mask = a.clone();
    assert!(postprocess(&mask, &cfg).is_err());
}
