use glyphdit_core::filter::{
    filter_by_nsd, kmeans_fit, nsd, score_samples, FilterConfig, FilterMode, KMeansConfig,
    StyleFeature,
};
use proptest::prelude::*;

fn feature(dim: usize) -> impl Strategy<Value = StyleFeature> {
    prop::collection::vec(-1.0f64..1.0, dim)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
        .prop_map(|v| StyleFeature::normalized(v).unwrap())
}

fn samples(n: usize) -> impl Strategy<Value = Vec<(String, StyleFeature)>> {
    prop::collection::vec(feature(4), n).prop_map(|fs| {
        fs.into_iter()
            .enumerate()
            .map(|(i, f)| (format!("s{i}"), f))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nsd_is_brute_force_min_and_lipschitz(data in samples(12), a in feature(4), b in feature(4)) {
        let fs: Vec<_> = data.iter().map(|(_, f)| f.clone()).collect();
        let m = kmeans_fit(&fs, &KMeansConfig { k: 3, ..Default::default() }).unwrap();
        let brute = m
            .centers
            .iter()
            .map(|c| c.iter().zip(a.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((nsd(&a, &m).unwrap() - brute).abs() < 1e-12);
        let dist: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!((nsd(&a, &m).unwrap() - nsd(&b, &m).unwrap()).abs() <= dist + 1e-12);
    }

    #[test]
    fn inertia_never_increases_and_fit_is_deterministic(data in samples(20), seed in 0u64..100) {
        let fs: Vec<_> = data.iter().map(|(_, f)| f.clone()).collect();
        let cfg = KMeansConfig { k: 4, seed, ..Default::default() };
        let m = kmeans_fit(&fs, &cfg).unwrap();
        prop_assert!(m.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert_eq!(m, kmeans_fit(&fs, &cfg).unwrap());
    }

    #[test]
    fn modes_partition_and_filter_is_idempotent(data in samples(15), d in 0.0f64..1.5) {
        let fs: Vec<_> = data.iter().map(|(_, f)| f.clone()).collect();
        let m = kmeans_fit(&fs, &KMeansConfig { k: 3, ..Default::default() }).unwrap();
        let above = FilterConfig { threshold: d, mode: FilterMode::KeepAbove, halve: false };
        let below = FilterConfig { mode: FilterMode::KeepBelowOrEqual, ..above.clone() };
        let ra = score_samples(&data, &m, &above).unwrap();
        let rb = score_samples(&data, &m, &below).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert!(x.kept != y.kept);
        }
        let once: Vec<_> = filter_by_nsd(&data, &m, &above).unwrap().into_iter().cloned().collect();
        let twice: Vec<_> = filter_by_nsd(&once, &m, &above).unwrap().into_iter().cloned().collect();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn separated_clouds_recover_means() {
    // two tight clouds around orthogonal axes
    let mut fs = Vec::new();
    for i in 0..10 {
        let e = 0.01 * (i as f64 - 4.5);
        fs.push(StyleFeature::normalized(vec![1.0, e, 0.0]).unwrap());
        fs.push(StyleFeature::normalized(vec![0.0, e, 1.0]).unwrap());
    }
    let m = kmeans_fit(&fs, &KMeansConfig { k: 2, seed: 7, ..Default::default() }).unwrap();
    for cloud in 0..2 {
        let members: Vec<&StyleFeature> = fs.iter().skip(cloud).step_by(2).collect();
        let mean: Vec<f64> = (0..3)
            .map(|d| members.iter().map(|f| f.as_slice()[d]).sum::<f64>() / members.len() as f64)
            .collect();
        let hit = m.centers.iter().any(|c| c.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(hit, "no centre near cloud {cloud} mean {mean:?}");
    }
}

#[test]
fn boundary_thresholds() {
    let data: Vec<(String, StyleFeature)> = (0..6)
        .map(|i| (format!("{i}"), StyleFeature::normalized(vec![1.0, i as f64, 2.0]).unwrap()))
        .collect();
    let fs: Vec<_> = data.iter().map(|(_, f)| f.clone()).collect();
    let m = kmeans_fit(&fs, &KMeansConfig { k: 2, ..Default::default() }).unwrap();
    let zero = FilterConfig { threshold: 0.0, ..Default::default() };
    let rows = score_samples(&data, &m, &zero).unwrap();
    assert!(rows.iter().all(|r| r.kept == (r.nsd > 0.0)));
    let huge = FilterConfig { threshold: 1e9, ..Default::default() };
    assert!(filter_by_nsd(&data, &m, &huge).unwrap().is_empty());
}
