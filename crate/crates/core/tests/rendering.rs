use nalgebra::{Vector2, Vector3};
use peelsplat::composite::render;
use peelsplat::math::{rgb_to_sh0, Quat};
use peelsplat::oracle::{abuffer_render_surfels, random_scene, sorted_full_render};
use peelsplat::raster_surfel::{finish_pixel, peel, SurfelFragment};
use peelsplat::splat_gauss::interval_transmittance;
use peelsplat::trainer::toy::overlap_rings;
use peelsplat::verify::{order_deviation, peel_mismatches, surfel_weight_error};
use peelsplat::{Camera, Gaussian, Scene, Surfel};
use proptest::prelude::*;

fn camera(size: usize) -> Camera {
    Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), size, size, 0.7)
}

fn facing(p: [f64; 3], s: f64, rgb: [f64; 3]) -> Surfel {
    Surfel::new(Vector3::from(p), Quat::new(1.0, 0.0, 0.0, 0.0), Vector2::new(s, s), vec![rgb.map(rgb_to_sh0)]).unwrap()
}

fn blob(p: [f64; 3], s: f64, sigma: f64, rgb: [f64; 3]) -> Gaussian {
    Gaussian::new(Vector3::from(p), sigma, Quat::new(1.0, 0.0, 0.0, 0.0), Vector3::repeat(s), vec![rgb.map(rgb_to_sh0)])
        .unwrap()
}

fn mae(a: &peelsplat::Image, b: &peelsplat::Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn peeled_layers_are_the_nearest_sorted_fragments(seed in any::<u64>(), n in 1usize..120, layers in 2usize..=4) {
        let (scene, cam) = random_scene(seed, n, 0, 32);
        prop_assert_eq!(peel_mismatches(&scene, &cam, layers), 0);
    }

    #[test]
    fn stack_invariants(seed in any::<u64>(), n in 1usize..80) {
        let (scene, cam) = random_scene(seed, n, 0, 32);
        let stack = peel(&scene, &cam, 3);
        for px in &stack.pixels {
            prop_assert_eq!(px.transmittance[0], 1.0);
            let mut t = 1.0;
            for (i, l) in px.layers().iter().enumerate() {
                t *= 1.0 - l.alpha;
                prop_assert_eq!(px.transmittance[i + 1], t);
                prop_assert!(px.transmittance[i + 1] <= px.transmittance[i]);
            }
            for w in px.layers().windows(2) {
                prop_assert!(w[0].key_cmp(&w[1]).is_lt());
                prop_assert!(w[0].surfel_id != w[1].surfel_id);
            }
            let ids: std::collections::BTreeSet<_> = px.layers().iter().map(|l| l.surfel_id).collect();
            prop_assert_eq!(ids.len(), px.count);
        }
        prop_assert!(surfel_weight_error(&scene, &cam, 3) <= 1e-12);
        prop_assert_eq!(&stack, &peel(&scene, &cam, 3));
    }

    #[test]
    fn gaussian_order_does_not_matter(seed in any::<u64>()) {
        let (scene, cam) = random_scene(seed, 20, 60, 32);
        prop_assert!(order_deviation(&scene, &cam, 3, seed) <= 1e-6);
    }

    /// Raising any layer's opacity never lets more of a Gaussian through.
    #[test]
    fn transmittance_lookup_is_monotone_in_opacity(
        alphas in prop::collection::vec(0.0f64..=1.0, 1..5),
        bump in 0usize..4,
        extra in 0.0f64..1.0,
        depth in 0.0f64..6.0,
        layers in 2usize..=4,
    ) {
        let frag = |i: usize, a: f64| SurfelFragment { depth: 1.0 + i as f64, alpha: a, surfel_id: i as u32, ..SurfelFragment::EMPTY };
        let frags: Vec<_> = alphas.iter().enumerate().map(|(i, a)| frag(i, *a)).collect();
        let mut raised = frags.clone();
        let k = bump % raised.len();
        raised[k].alpha = (raised[k].alpha + extra).min(1.0);
        let n = frags.len().min(layers);
        let (t0, _) = interval_transmittance(&finish_pixel(&frags[..n], layers), depth, layers);
        let (t1, _) = interval_transmittance(&finish_pixel(&raised[..n], layers), depth, layers);
        prop_assert!(t1 <= t0);
    }

    #[test]
    fn colours_in_range_render_in_range(seed in any::<u64>()) {
        let mut rng_scene = Scene::empty(0);
        let (s, cam) = random_scene(seed, 15, 30, 24);
        rng_scene.background = s.background;
        for x in &s.surfels {
            let mut y = x.clone();
            y.sh = vec![[0.2 + 0.6 * (x.position.x.abs() % 1.0), 0.5, 0.9].map(rgb_to_sh0)];
            rng_scene.surfels.push(y);
        }
        for g in &s.gaussians {
            let mut y = g.clone();
            y.sh = vec![[0.1, 0.8 * (g.position.y.abs() % 1.0), 1.0].map(rgb_to_sh0)];
            rng_scene.gaussians.push(y);
        }
        let r = render(&rng_scene, &cam, 3);
        for (c, w) in r.accum.color.iter().zip(&r.accum.weight) {
            prop_assert!(*w >= 0.0);
            for ch in c {
                prop_assert!(*ch >= -1e-12 && *ch <= w + 1e-12);
            }
        }
        prop_assert!(r.image.data.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }
}

#[test]
fn few_fragments_match_the_abuffer_exactly() {
    // at most three fragments per pixel, so peeling truncates nothing
    let mut scene = Scene::empty(0);
    scene.background = [0.3, 0.6, 0.9];
    scene.surfels.push(facing([-0.2, 0.0, 0.0], 0.3, [1.0, 0.0, 0.0]));
    scene.surfels.push(facing([0.2, 0.0, 0.3], 0.3, [0.0, 1.0, 0.0]));
    scene.surfels.push(facing([0.0, 0.2, 0.6], 0.3, [0.0, 0.0, 1.0]));
    let cam = camera(32);
    let ab = abuffer_render_surfels(&scene, &cam);
    assert!(ab.fragments.iter().all(|f| f.len() <= 3));
    let r = render(&scene, &cam, 3);
    assert_eq!(r.surfel.color, ab.color);
}

#[test]
fn deep_overlap_truncates_against_the_abuffer() {
    let mut scene = Scene::empty(0);
    for i in 0..5 {
        // concentric rings: some pixels see five semi-transparent fragments
        scene.surfels.push(facing([0.0, 0.0, 0.2 * i as f64], 0.15, [0.2 * i as f64, 0.5, 0.1]));
    }
    let cam = camera(32);
    let ab = abuffer_render_surfels(&scene, &cam);
    let deep = ab
        .fragments
        .iter()
        .position(|f| f.len() == 5 && f.iter().all(|x| x.alpha < 1.0))
        .expect("a pixel with five ring fragments");
    let r = render(&scene, &cam, 3);
    let frags = &ab.fragments[deep];
    // the pipeline stops after three layers; the rest of the light reaches the background
    let t3: f64 = frags[..3].iter().map(|f| 1.0 - f.alpha).product();
    for ch in 0..3 {
        let mut tail = 0.0;
        let mut t = t3;
        for f in &frags[3..] {
            tail += f.alpha * t * f.color[ch];
            t *= 1.0 - f.alpha;
        }
        tail += (t - t3) * scene.background[ch];
        let diff = ab.color[deep][ch] - r.surfel.color[deep][ch];
        assert!((diff - tail).abs() < 1e-14, "{diff} vs {tail}");
    }
    assert!(ab.color[deep] != r.surfel.color[deep]);
}

#[test]
fn four_layers_add_nothing_once_three_saturate() {
    let toy = overlap_rings(64);
    let cam = &toy.cameras[0];
    let r3 = render(&toy.scene, cam, 3);
    assert!(r3.stack.pixels.iter().all(|p| p.transmittance[3] == 0.0));
    let r4 = render(&toy.scene, cam, 4);
    assert!(mae(&r3.image, &r4.image) < 1e-3);
    assert_eq!(r3.image, r4.image);
}

#[test]
fn pipeline_and_sorted_oracle_agree_where_they_should() {
    let cam = camera(32);
    // single opaque surfel
    let mut one = Scene::empty(0);
    one.surfels.push(facing([0.0; 3], 0.6, [0.4, 0.5, 0.6]));
    assert_eq!(render(&one, &cam, 3).image, sorted_full_render(&one, &cam));

    // Gaussian fully behind an opaque surfel: hidden in both
    let mut hidden = one.clone();
    hidden.surfels[0].eps = 0.05;
    hidden.gaussians.push(blob([0.0, 0.0, 0.5], 0.05, 1.0, [1.0, 1.0, 0.0]));
    assert_eq!(render(&hidden, &cam, 3).image, render(&one, &cam, 3).image);
    assert_eq!(sorted_full_render(&hidden, &cam), sorted_full_render(&one, &cam));

    // faint, small Gaussians in front of every surfel: nearly no mutual occlusion
    let mut front = Scene::empty(0);
    front.background = [0.2, 0.2, 0.2];
    front.surfels.push(facing([0.0, 0.0, 0.5], 1.5, [0.3, 0.6, 0.3]));
    for i in 0..12 {
        let (x, y) = ((i % 4) as f64 * 0.3 - 0.45, (i / 4) as f64 * 0.3 - 0.3);
        front.gaussians.push(blob([x, y, -0.5], 0.03, 0.05, [0.9, 0.2, 0.2]));
    }
    let err = mae(&render(&front, &cam, 3).image, &sorted_full_render(&front, &cam));
    assert!(err < 0.02, "{err}");
}

#[test]
fn rendering_is_deterministic() {
    let (scene, cam) = random_scene(9, 60, 120, 48);
    let a = render(&scene, &cam, 3);
    let b = render(&scene, &cam, 3);
    assert_eq!(a.image, b.image);
    assert_eq!(a.accum, b.accum);
}
