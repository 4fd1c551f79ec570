use super::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |_| rng.random_bool(p))
}

/// Direct 2D window sums, no separability.
fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>, r: f64) -> f64 {
    let k = 11;
    let g1: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let (c1, c2) = ((0.01 * r).powi(2), (0.03 * r).powi(2));
    let (h, w) = a.dim();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let wt = g1[u] * g1[v] / norm;
                    let (x, y) = (a[[i + u, j + v]], b[[i + u, j + v]]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_identity_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = random_image(&mut rng, 16, 19);
        let b = &a * 0.7 + random_image(&mut rng, 16, 19) * 0.3;
        assert_eq!(ssim(a.view(), a.view(), 1.0).unwrap(), 1.0);
        let s = ssim(a.view(), b.view(), 1.0).unwrap();
        assert!((s - ssim_oracle(&a, &b, 1.0)).abs() < 1e-12);
        assert_eq!(s, ssim(b.view(), a.view(), 1.0).unwrap());
        assert!(s.abs() <= 1.0);
    }
}

#[test]
fn ssim_of_inverted_binary_image_is_negative() {
    let x = Array2::from_shape_fn((24, 24), |(i, j)| if (i / 3 + j / 3) % 2 == 0 { 1.0 } else { 0.0 });
    let inv = x.mapv(|v| 1.0 - v);
    assert!(ssim(x.view(), inv.view(), 1.0).unwrap() < 0.0);
}

#[test]
fn ssim_errors() {
    let a = Array2::<f64>::zeros((12, 12));
    let b = Array2::<f64>::zeros((12, 13));
    assert!(matches!(ssim(a.view(), b.view(), 1.0), Err(MetricsError::ShapeMismatch { .. })));
    let small = Array2::<f64>::zeros((10, 12));
    assert!(matches!(ssim(small.view(), small.view(), 1.0), Err(MetricsError::TooSmall(_))));
    assert!(matches!(ssim(a.view(), a.view(), 0.0), Err(MetricsError::BadRange(_))));
}

#[test]
fn psnr_values() {
    let a = Array2::<f64>::zeros((10, 10));
    let b = Array2::from_elem((10, 10), 0.1);
    assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);
    let mut last = f64::INFINITY;
    for k in 1..20 {
        let b = Array2::from_elem((10, 10), 0.05 * k as f64);
        let p = psnr(a.view(), b.view(), 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn dice_examples() {
    let p = array![[true, true, false]];
    let g = array![[false, true, true]];
    assert_eq!(dice(p.view(), g.view()).unwrap(), 0.5);
    assert_eq!(dice(p.view(), p.view()).unwrap(), 1.0);
    let q = array![[false, false, true]];
    let r = array![[true, false, false]];
    assert_eq!(dice(q.view(), r.view()).unwrap(), 0.0);
    let e = Array2::from_elem((2, 2), false);
    assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
}

fn set_of(m: &Array2<bool>) -> HashSet<(usize, usize)> {
    m.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect()
}

#[test]
fn dice_matches_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let p = rng.random_range(0.0..0.6);
        let a = random_mask(&mut rng, 16, p);
        let b = random_mask(&mut rng, 16, p);
        let (sa, sb) = (set_of(&a), set_of(&b));
        let expected = if sa.is_empty() && sb.is_empty() {
            1.0
        } else {
            2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
        };
        assert_eq!(dice(a.view(), b.view()).unwrap(), expected);
        assert_eq!(dice(b.view(), a.view()).unwrap(), expected);
    }
}

/// Border pixels via a zero-padded copy, then exhaustive pairwise distances.
fn assd_oracle(a: &Array2<bool>, b: &Array2<bool>, spacing: (f64, f64)) -> Option<f64> {
    let border = |m: &Array2<bool>| -> Vec<(f64, f64)> {
        let (h, w) = m.dim();
        let mut pad = Array2::from_elem((h + 2, w + 2), false);
        pad.slice_mut(ndarray::s![1..h + 1, 1..w + 1]).assign(m);
        let mut out = Vec::new();
        for i in 1..=h {
            for j in 1..=w {
                if pad[[i, j]] && (!pad[[i - 1, j]] || !pad[[i + 1, j]] || !pad[[i, j - 1]] || !pad[[i, j + 1]]) {
                    out.push(((i - 1) as f64 * spacing.0, (j - 1) as f64 * spacing.1));
                }
            }
        }
        out
    };
    let (ba, bb) = (border(a), border(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let mut distances = Vec::new();
    for (from, to) in [(&ba, &bb), (&bb, &ba)] {
        for p in from {
            let d = to
                .iter()
                .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            distances.push(d);
        }
    }
    Some(distances.iter().sum::<f64>() / distances.len() as f64)
}

#[test]
fn assd_examples() {
    let mut a = Array2::from_elem((8, 8), false);
    let mut b = a.clone();
    a[[2, 1]] = true;
    b[[2, 4]] = true;
    assert_eq!(assd(a.view(), b.view(), (1.0, 1.0)).unwrap(), Some(3.0));
    assert_eq!(assd(a.view(), a.view(), (1.0, 1.0)).unwrap(), Some(0.0));
    assert_eq!(assd(a.view(), b.view(), (1.0, 0.5)).unwrap(), Some(1.5));
    let e = Array2::from_elem((8, 8), false);
    assert_eq!(assd(a.view(), e.view(), (1.0, 1.0)).unwrap(), None);
    assert_eq!(assd(e.view(), e.view(), (1.0, 1.0)).unwrap(), None);
}

#[test]
fn assd_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let p = rng.random_range(0.02..0.7);
        let a = random_mask(&mut rng, 16, p);
        let b = random_mask(&mut rng, 16, p);
        let spacing = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let got = assd(a.view(), b.view(), spacing).unwrap();
        let want = assd_oracle(&a, &b, spacing);
        match (got, want) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
            (x, y) => assert_eq!(x, y),
        }
        assert_eq!(got, assd(b.view(), a.view(), spacing).unwrap());
    }
}

#[test]
fn largest_component_examples() {
    let single = array![[false, true, true], [false, true, false], [false, false, false]];
    assert_eq!(keep_largest_component(single.view()), single);

    let two = array![
        [true, true, false, false, false],
        [true, true, false, true, false],
        [false, true, false, true, false],
        [false, false, false, true, false],
    ];
    let expected = array![
        [true, true, false, false, false],
        [true, true, false, false, false],
        [false, true, false, false, false],
        [false, false, false, false, false],
    ];
    assert_eq!(keep_largest_component(two.view()), expected);

    let empty = Array2::from_elem((3, 4), false);
    assert_eq!(keep_largest_component(empty.view()), empty);

    // Diagonal neighbours are separate components; equal sizes keep the first.
    let tie = array![[false, true], [true, false]];
    assert_eq!(keep_largest_component(tie.view()), array![[false, true], [false, false]]);
}

fn is_4_connected(m: &Array2<bool>) -> bool {
    let cells = set_of(m);
    let Some(&start) = cells.iter().min() else {
        return true;
    };
    let mut seen = HashSet::from([start]);
    let mut stack = vec![start];
    while let Some((i, j)) = stack.pop() {
        let cand = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
        for c in cand {
            if cells.contains(&c) && seen.insert(c) {
                stack.push(c);
            }
        }
    }
    seen.len() == cells.len()
}

proptest! {
    #[test]
    fn largest_component_is_connected_subset(seed in 0u64..10_000, p in 0.0f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, 12, p);
        let out = keep_largest_component(m.view());
        prop_assert!(Zip::from(&out).and(&m).all(|&o, &i| !o || i));
        prop_assert!(is_4_connected(&out));
        prop_assert_eq!(out.iter().any(|&v| v), m.iter().any(|&v| v));
    }
}

fn classes(rows: &[&str]) -> Array2<u8> {
    let h = rows.len();
    let w = rows[0].len();
    Array2::from_shape_fn((h, w), |(i, j)| rows[i].as_bytes()[j] - b'0')
}

#[test]
fn evaluate_perfect_and_empty_predictions() {
    let gt = classes(&["00000", "02220", "02310", "02220", "00000"]);
    let m = evaluate_slice("c", 3, gt.view(), gt.view(), None, (1.0, 1.0)).unwrap();
    for r in Region::ALL {
        assert_eq!(m.region(r).dice, 1.0);
        assert_eq!(m.region(r).assd, Some(0.0));
    }
    assert_eq!((m.ssim, m.psnr), (None, None));

    let bg = Array2::<u8>::zeros((5, 5));
    let m = evaluate_slice("c", 3, bg.view(), gt.view(), None, (1.0, 1.0)).unwrap();
    for r in Region::ALL {
        assert_eq!(m.region(r).dice, 0.0);
        assert_eq!(m.region(r).assd, None);
    }
}

#[test]
fn evaluate_hand_computed_fixture() {
    // gt: WT = 5 pixels, TC = {(1,2),(1,3)}, ET = {(1,3)}
    let gt = classes(&["0000", "0213", "0220", "0000"]);
    // pred: WT has a stray pixel at (3,0) that cleanup removes; ET misses.
    let pred = classes(&["0000", "0211", "0200", "3000"]);
    let real = Array2::from_shape_fn((12, 12), |(i, j)| ((i * 12 + j) as f64 / 72.0) - 1.0);
    let synth = real.mapv(|v| v + 0.1);
    let pair = SynthesisPair {
        synthesized: synth.view(),
        real: real.view(),
    };
    let pad = |m: &Array2<u8>| {
        let mut out = Array2::<u8>::zeros((12, 12));
        out.slice_mut(ndarray::s![..4, ..4]).assign(m);
        out
    };
    let m = evaluate_slice("fx", 0, pad(&pred).view(), pad(&gt).view(), Some(pair), (1.0, 1.0)).unwrap();
    // WT after cleanup: pred {(1,1),(1,2),(1,3),(2,1)} vs gt 5 pixels -> 2·4/9
    assert_eq!(m.wt.dice, 8.0 / 9.0);
    // TC: pred {(1,2),(1,3),(3,0)} vs gt {(1,2),(1,3)}; only (3,0) is off,
    // sqrt(8) from (1,2)
    assert_eq!(m.tc.dice, 0.8);
    assert!((m.tc.assd.unwrap() - 8f64.sqrt() / 5.0).abs() < 1e-12);
    // ET: pred {(3,0)} vs gt {(1,3)}: disjoint, distance sqrt(4 + 9)
    assert_eq!(m.et.dice, 0.0);
    assert!((m.et.assd.unwrap() - 13f64.sqrt()).abs() < 1e-12);
    assert!((m.psnr.unwrap() - 10.0 * (4.0f64 / 0.01).log10()).abs() < 1e-9);
    assert!((m.ssim.unwrap() - ssim_oracle(&synth, &real, 2.0)).abs() < 1e-12);
}

fn sample_report() -> MetricsReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut report = MetricsReport::new("pixel");
    for k in 0..7 {
        let score = |rng: &mut ChaCha8Rng| RegionScore {
            dice: rng.random_range(0.0..1.0),
            assd: rng.random_bool(0.7).then(|| rng.random_range(0.0..5.0)),
        };
        report.rows.push(SliceMetrics {
            case_id: format!("case{}", k % 3),
            slice_index: k,
            ssim: Some(rng.random_range(0.5..1.0)),
            psnr: Some(if k == 2 { f64::INFINITY } else { rng.random_range(15.0..30.0) }),
            wt: score(&mut rng),
            et: score(&mut rng),
            tc: score(&mut rng),
        });
    }
    report
}

#[test]
fn summary_means_and_csv_round_trip() {
    let report = sample_report();
    let s = report.summary().unwrap();
    assert_eq!(s.slices, 7);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let back = MetricsReport::read_csv(&buf[..], "pixel").unwrap();
    assert_eq!(back.rows.len(), 7);
    let n = 7.0;
    let mean_psnr = back.rows.iter().map(|r| r.psnr.unwrap()).sum::<f64>() / n;
    assert!(back.rows.iter().all(|r| r.psnr.unwrap() <= PSNR_CAP));
    assert!((s.psnr.unwrap() - mean_psnr).abs() < 1e-9);
    for r in Region::ALL {
        let dice = back.rows.iter().map(|row| row.region(r).dice).sum::<f64>() / n;
        assert!((s.region(r).dice - dice).abs() < 1e-9);
        let defined: Vec<f64> = back.rows.iter().filter_map(|row| row.region(r).assd).collect();
        assert_eq!(s.region(r).assd_defined, defined.len());
        assert_eq!(s.region(r).assd_undefined, 7 - defined.len());
    }
    let mut json = Vec::new();
    report.write_summary_json(&mut json).unwrap();
    let parsed: Summary = serde_json::from_slice(&json).unwrap();
    assert_eq!(parsed, s);
    assert!(matches!(MetricsReport::new("pixel").summary(), Err(MetricsError::Empty)));
}
