use candle_core::{Device, Tensor};
use glyphdit_model::rope::{apply_rope3d, default_split, Coord};
use proptest::prelude::*;

fn vec_tensor(v: &[f64], hd: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, 1, hd), &Device::Cpu).unwrap()
}

fn rotate(v: &[f64], c: Coord, split: [usize; 3]) -> Vec<f64> {
    let hd = v.len();
    apply_rope3d(&vec_tensor(v, hd), &[c], split)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn coord() -> impl Strategy<Value = Coord> {
    (0i64..8, 0i64..16, 0i64..16).prop_map(|(a, b, c)| [a, b, c])
}

fn unit_vectors(hd: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, hd)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_preserves_norm(v in unit_vectors(12), c in coord()) {
        let split = default_split(12).unwrap();
        let r = rotate(&v, c, split);
        prop_assert!((dot(&r, &r).sqrt() - dot(&v, &v).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn scores_depend_only_on_offsets(q in unit_vectors(12), k in unit_vectors(12),
                                     a in coord(), b in coord(), shift in coord()) {
        let split = default_split(12).unwrap();
        let add = |p: Coord| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
        let s0 = dot(&rotate(&q, a, split), &rotate(&k, b, split));
        let s1 = dot(&rotate(&q, add(a), split), &rotate(&k, add(b), split));
        prop_assert!((s0 - s1).abs() < 1e-6, "{s0} vs {s1}");
    }

    #[test]
    fn origin_is_identity(v in unit_vectors(16)) {
        let r = rotate(&v, [0, 0, 0], [4, 4, 8]);
        for (x, y) in r.iter().zip(&v) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn each_axis_moves_only_its_chunk() {
    let split = [4, 4, 4];
    let v: Vec<f64> = (0..12).map(|i| i as f64 + 1.0).collect();
    let r = rotate(&v, [0, 3, 0], split);
    assert_eq!(&r[..4], &v[..4]);
    assert_eq!(&r[8..], &v[8..]);
    assert!(r[4..8].iter().zip(&v[4..8]).any(|(a, b)| (a - b).abs() > 1e-3));
}
