use proptest::prelude::*;

use ss3d_core::metrics::{assd, dsc, volume_similarity};
use ss3d_core::paths::{enumerate_paths, gather_sequence, is_bijective, is_continuous, scatter_back, unflatten};
use ss3d_core::pipeline::{
    make_grid, read_labels, read_volume, write_labels, write_volume, ClassTable, LabelMap, PatchGrid, VoteAccumulator,
    Volume,
};
use ss3d_core::s6::{selective_scan, ScanKernel};
use ss3d_core::tensor::{no_grad, softmax_channel, Tensor};
use ss3d_core::training::CosineWarmRestarts;

fn distinct_dims() -> impl Strategy<Value = [usize; 3]> {
    proptest::sample::subsequence((2usize..7).collect::<Vec<_>>(), 3)
        .prop_shuffle()
        .prop_map(|v| [v[0], v[1], v[2]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_path_family_is_48_distinct_continuous_bijections(dims in distinct_dims()) {
        let paths = enumerate_paths(dims).unwrap();
        let n = dims.iter().product();
        prop_assert_eq!(paths.len(), 48);
        let mut orders: Vec<_> = paths.iter().map(|p| p.order.clone()).collect();
        orders.sort();
        orders.dedup();
        prop_assert_eq!(orders.len(), 48);
        for p in &paths {
            prop_assert!(is_bijective(&p.order, n));
            prop_assert!(is_continuous(&p.order, dims));
            for t in 0..n {
                prop_assert_eq!(p.inverse[p.order[t]], t);
                prop_assert_eq!(p.coord(t), unflatten(dims, p.order[t]));
            }
        }
    }

    #[test]
    fn gather_scatter_is_exact(dims in distinct_dims(), seed in 0u64..1000) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..2 * n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 * 0.37 - 11.0).collect();
        let x = Tensor::from_vec(&[2, dims[0], dims[1], dims[2]], data.clone()).unwrap();
        for p in enumerate_paths(dims).unwrap().iter().step_by(5) {
            let back = scatter_back(&gather_sequence(&x, p).unwrap(), p).unwrap();
            prop_assert_eq!(back.to_vec(), data.clone());
        }
    }

    #[test]
    fn scan_kernels_agree_and_are_causal(
        l in 1usize..40,
        ch in 1usize..5,
        n in 1usize..9,
        vals in proptest::collection::vec(-1.0f64..1.0, 400),
    ) {
        let _g = no_grad();
        let take = |k: usize, off: usize| -> Vec<f64> { (0..k).map(|i| vals[(off + i * 7) % vals.len()]).collect() };
        let x = take(l * ch, 0);
        let delta: Vec<f64> = take(l * ch, 3).iter().map(|v| 0.01 + v.abs() * 0.5).collect();
        let a: Vec<f64> = take(ch * n, 5).iter().map(|v| -(v * 2.0).exp()).collect();
        let (b, c, d) = (take(l * n, 11), take(l * n, 13), take(ch, 17));
        let t = |shape: &[usize], v: &[f64]| Tensor::from_vec(shape, v.to_vec()).unwrap();
        let run = |x: &[f64], k| {
            selective_scan(&t(&[l, ch], x), &t(&[l, ch], &delta), &t(&[ch, n], &a), &t(&[l, n], &b), &t(&[l, n], &c), &t(&[ch], &d), k)
                .unwrap()
                .to_vec()
        };
        let seq = run(&x, ScanKernel::Sequential);
        let par = run(&x, ScanKernel::Parallel);
        for (s, p) in seq.iter().zip(&par) {
            prop_assert!((s - p).abs() < 1e-10);
        }
        // perturbing the last input leaves every earlier output untouched
        let mut x2 = x.clone();
        for v in &mut x2[(l - 1) * ch..] {
            *v += 1.0;
        }
        let seq2 = run(&x2, ScanKernel::Sequential);
        prop_assert_eq!(&seq[..(l - 1) * ch], &seq2[..(l - 1) * ch]);
    }

    #[test]
    fn softmax_is_a_simplex(k in 1usize..7, v in 1usize..20, scale in 0.1f64..200.0, seed in 0u64..1000) {
        let data: Vec<f64> = (0..k * v).map(|i| (((i as u64 + seed) * 7919 % 101) as f64 / 50.0 - 1.0) * scale).collect();
        let p = softmax_channel(&Tensor::from_vec(&[k, v, 1, 1], data).unwrap()).to_vec();
        for j in 0..v {
            let s: f64 = (0..k).map(|c| p[c * v + j]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!((0..k).all(|c| p[c * v + j] >= 0.0));
        }
    }

    #[test]
    fn grid_covers_every_voxel(p in 1usize..20, extra in 0usize..40, s_frac in 1usize..=100) {
        let dim = p + extra;
        let s = (p * s_frac).div_ceil(100).max(1);
        let g = make_grid(dim, p, s).unwrap();
        prop_assert_eq!(g[0], 0);
        prop_assert_eq!(*g.last().unwrap(), dim - p);
        prop_assert!(g.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= s));
        prop_assert_eq!(g.len(), (dim - p).div_ceil(s) + 1);
    }

    #[test]
    fn one_hot_votes_reproduce_labels(
        d in 4usize..9, h in 4usize..9, w in 4usize..9,
        p in 2usize..5, s in 1usize..5, k in 2usize..5,
        seed in 0u64..1000,
    ) {
        prop_assume!(s <= p && p <= d.min(h).min(w));
        let dims = [d, h, w];
        let truth: Vec<u16> = (0..d * h * w).map(|i| ((i as u64 * 31 + seed) % k as u64) as u16).collect();
        let grid = PatchGrid::new(dims, p, s).unwrap();
        let mut acc = VoteAccumulator::new(dims, k);
        for at in grid.positions() {
            let mut probs = vec![0f32; k * p * p * p];
            for z in 0..p {
                for y in 0..p {
                    for x in 0..p {
                        let c = truth[((at[0] + z) * h + at[1] + y) * w + at[2] + x] as usize;
                        probs[c * p * p * p + (z * p + y) * p + x] = 1.0;
                    }
                }
            }
            acc.add(at, &Tensor::from_vec(&[k, p, p, p], probs).unwrap()).unwrap();
        }
        prop_assert_eq!(acc.finish(&ClassTable::identity(k)).unwrap().data, truth);
    }

    #[test]
    fn overlap_metrics_are_symmetric_and_bounded(
        a in proptest::collection::vec(any::<bool>(), 64),
        b in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let (d, v) = (dsc(&a, &b).unwrap(), volume_similarity(&a, &b).unwrap());
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert_eq!(v, volume_similarity(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&v));
        if a.contains(&true) && b.contains(&true) {
            let s = assd(&a, &b, [4, 4, 4], [1.0; 3]).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert!((s - assd(&b, &a, [4, 4, 4], [1.0; 3]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_peaks_at_every_restart(t0 in 1usize..20, t_mult in 1usize..4, lr_max in 1e-4f64..1e-1) {
        let s = CosineWarmRestarts { lr_max, lr_min: lr_max * 1e-3, t0, t_mult };
        let mut start = 0;
        let mut len = t0;
        for _ in 0..4 {
            prop_assert!((s.lr_at(start) - lr_max).abs() < 1e-15);
            for i in 1..len {
                prop_assert!(s.lr_at(start + i) < s.lr_at(start + i - 1));
            }
            start += len;
            len *= t_mult;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn files_round_trip(
        dims in (1usize..6, 1usize..6, 1usize..6).prop_map(|(a, b, c)| [a, b, c]),
        seed in 0u64..1000,
        nifti in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let ext = if nifti { "nii" } else { "vol" };
        let n = dims.iter().product::<usize>();
        let mut v = Volume::new(dims, (0..n).map(|i| ((i as u64 * 97 + seed) % 1013) as f32 * 0.25 - 60.0).collect()).unwrap();
        v.orientation = "LIA".into();
        let vp = dir.path().join(format!("v.{ext}"));
        write_volume(&vp, &v).unwrap();
        let back = read_volume(&vp).unwrap();
        prop_assert_eq!(back.dims, dims);
        prop_assert_eq!(&back.data, &v.data);
        prop_assert_eq!(&back.orientation, "LIA");

        let table = ClassTable::identity(4);
        let labels = LabelMap::new(dims, (0..n).map(|i| ((i as u64 + seed) % 4) as u16).collect(), table.clone()).unwrap();
        let lp = dir.path().join(format!("l.{ext}"));
        write_labels(&lp, &labels).unwrap();
        prop_assert_eq!(read_labels(&lp, &table).unwrap().data, labels.data);
    }
}
