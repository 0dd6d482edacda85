use occflow_core::data::{SyntheticScene, Texture};
use occflow_core::flow::{
    epe, fl_outlier_rate, restore_flow, transform_flow, transform_image, FlowField, GeoTransform,
    TransformKind,
};
use proptest::prelude::*;

fn field(w: usize, h: usize, data: Vec<f32>) -> FlowField {
    FlowField::new(w, h, data).unwrap()
}

fn any_field() -> impl Strategy<Value = FlowField> {
    (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
        prop::collection::vec(-50.0f32..50.0, 2 * w * h).prop_map(move |d| field(w, h, d))
    })
}

fn bits(f: &FlowField) -> Vec<u32> {
    f.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn restore_inverts_transform_bitwise(f in any_field()) {
        for kind in TransformKind::ALL {
            let t = GeoTransform::new(kind, f.width(), f.height());
            let back = restore_flow(&transform_flow(&f, &t).unwrap(), &t).unwrap();
            prop_assert_eq!(bits(&back), bits(&f));
        }
    }

    #[test]
    fn transform_commutes_with_pixel_map(d in prop::collection::vec(-20.0f32..20.0, 2 * 64)) {
        let f = field(8, 8, d);
        for kind in TransformKind::ALL {
            let t = GeoTransform::new(kind, 8, 8);
            let g = transform_flow(&f, &t).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let (u, v) = f.get(x, y);
                    let (px, py) = t.map_pixel(x, y);
                    prop_assert_eq!(g.get(px, py), t.map_vector(u, v));
                }
            }
        }
    }

    #[test]
    fn metrics_are_invariant_under_joint_transforms(
        a in prop::collection::vec(-8.0f32..8.0, 2 * 30),
        b in prop::collection::vec(-8.0f32..8.0, 2 * 30),
    ) {
        let (p, g) = (field(6, 5, a), field(6, 5, b));
        let e0 = epe(&p, &g, None).unwrap();
        let f0 = fl_outlier_rate(&p, &g, None).unwrap();
        for kind in TransformKind::ALL {
            let t = GeoTransform::new(kind, 6, 5);
            let (tp, tg) = (transform_flow(&p, &t).unwrap(), transform_flow(&g, &t).unwrap());
            prop_assert!((epe(&tp, &tg, None).unwrap() - e0).abs() < 1e-9);
            prop_assert_eq!(fl_outlier_rate(&tp, &tg, None).unwrap(), f0);
        }
    }
}

#[test]
fn jacobians_match_the_documented_vector_maps() {
    let t = |k| GeoTransform::new(k, 3, 3);
    assert_eq!(t(TransformKind::HFlip).map_vector(2.0, 3.0), (-2.0, 3.0));
    assert_eq!(t(TransformKind::VFlip).map_vector(2.0, 3.0), (2.0, -3.0));
    assert_eq!(t(TransformKind::Rot90Cw).map_vector(2.0, 3.0), (-3.0, 2.0));
    assert_eq!(t(TransformKind::Rot180).map_vector(2.0, 3.0), (-2.0, -3.0));
    assert_eq!(t(TransformKind::Rot270Cw).map_vector(2.0, 3.0), (3.0, -2.0));
}

/// The kind `c` with `T_c = T_b after T_a`, found by brute force on pixel
/// maps of a non-square extent.
fn compose(a: TransformKind, b: TransformKind) -> TransformKind {
    let (w, h) = (5, 3);
    let ta = GeoTransform::new(a, w, h);
    let (ow, oh) = ta.output_extent();
    let tb = GeoTransform::new(b, ow, oh);
    let hits: Vec<TransformKind> = TransformKind::ALL
        .into_iter()
        .filter(|&c| {
            let tc = GeoTransform::new(c, w, h);
            (0..h).all(|y| {
                (0..w).all(|x| {
                    let (x1, y1) = ta.map_pixel(x, y);
                    tb.map_pixel(x1, y1) == tc.map_pixel(x, y)
                })
            })
        })
        .collect();
    assert!(hits.len() <= 1);
    hits.first().copied().unwrap_or_else(|| panic!("{a} then {b} leaves the set"))
}

#[test]
fn composition_table() {
    use TransformKind::*;
    assert_eq!(compose(Rot90Cw, Rot90Cw), Rot180);
    assert_eq!(compose(Rot90Cw, Rot180), Rot270Cw);
    assert_eq!(compose(Rot90Cw, Rot270Cw), Identity);
    assert_eq!(compose(HFlip, HFlip), Identity);
    assert_eq!(compose(HFlip, VFlip), Rot180);
    assert_eq!(compose(Rot180, Rot180), Identity);
    for k in TransformKind::ALL {
        assert_eq!(compose(k, k.inverse()), Identity, "{k}");
        assert_eq!(compose(Identity, k), k);
    }
    // Restoring a quarter turn is the opposite quarter turn.
    assert_eq!(Rot90Cw.inverse(), Rot270Cw);
    let f = FlowField::from_fn(4, 2, |x, y| (x as f32 - 1.5, y as f32 * 2.0 - 0.5));
    let t = GeoTransform::new(Rot90Cw, 4, 2);
    let g = transform_flow(&f, &t).unwrap();
    let r = GeoTransform::new(Rot270Cw, 2, 4);
    assert_eq!(restore_flow(&g, &t).unwrap(), transform_flow(&g, &r).unwrap());
}

#[test]
fn transformed_translation_pair_has_transformed_flow() {
    for (vx, vy) in [(2.0, 0.0), (-1.0, 3.0), (0.0, -2.0)] {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let scene = SyntheticScene {
            width: 16,
            height: 12,
            frames: 3,
            background: Texture::random(&mut rng),
            background_velocity: (vx, vy),
            sprites: vec![],
        };
        let a = scene.render_frame(0);
        let b = scene.render_frame(1);
        let (f, _) = scene.ground_truth(0, 1).unwrap();
        for kind in TransformKind::ALL {
            let t = GeoTransform::new(kind, 16, 12);
            let (ta, tb) = (transform_image(&a, &t).unwrap(), transform_image(&b, &t).unwrap());
            let tf = transform_flow(&f, &t).unwrap();
            let (ow, oh) = t.output_extent();
            let (du, dv) = t.map_vector(vx as f32, vy as f32);
            assert!(tf.data()[..ow * oh].iter().all(|&u| u == du));
            assert!(tf.data()[ow * oh..].iter().all(|&v| v == dv));
            // The analytic flow of the transformed pair is the constant
            // J v: every pixel that stays inside matches exactly.
            for y in 0..oh {
                for x in 0..ow {
                    let (qx, qy) = (x as f32 + du, y as f32 + dv);
                    if qx < 0.0 || qy < 0.0 || qx >= ow as f32 || qy >= oh as f32 {
                        continue;
                    }
                    for c in 0..3 {
                        assert_eq!(ta.get(c, x, y), tb.get(c, qx as usize, qy as usize), "{kind}");
                    }
                }
            }
        }
    }
}
