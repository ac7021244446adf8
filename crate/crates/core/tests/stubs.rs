mod oracle;

use cfagent_core::metrics::{self, Plane};
use cfagent_core::stubs::{self, Lesion, Region, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_lesion(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Lesion {
    let r = rng.gen_range(3.0..8.0f64).floor();
    Lesion {
        cx: rng.gen_range(r..f64::from(w) - 1.0 - r).floor(),
        cy: rng.gen_range(r..f64::from(h) - 1.0 - r).floor(),
        r,
        a: rng.gen_range(0.3..0.8),
    }
}

fn tuple(l: &Lesion) -> (f64, f64, f64, f64) {
    (l.cx, l.cy, l.r, l.a)
}

#[test]
fn scenes_render_bit_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(16..64), rng.gen_range(16..64));
        let seed = rng.gen();
        let lesion = rng.gen_bool(0.7).then(|| random_lesion(&mut rng, w, h));
        let scene = SyntheticScene::new(seed, w, h, lesion).unwrap();
        let want = oracle::scene(seed, w as usize, h as usize, lesion.as_ref().map(tuple));
        assert_eq!(scene.render(), want);
        assert_eq!(scene.render_background(), oracle::background(seed, w as usize, h as usize));
    }
}

#[test]
fn classifier_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(1..2000);
        let px: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * rng.gen::<f32>()).collect();
        let got = stubs::classify(&px);
        let want = oracle::classify(&px);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn editors_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let (w, h) = (rng.gen_range(16..48u32), rng.gen_range(16..48u32));
        let seed = rng.gen();
        let lesion = random_lesion(&mut rng, w, h);
        let img = SyntheticScene::new(seed, w, h, Some(lesion)).unwrap().to_artifact();
        let s = [1.0, rng.gen::<f64>()][rng.gen_range(0..2)];
        let bg = oracle::background(seed, w as usize, h as usize);

        let region = if rng.gen_bool(0.5) { Some(lesion.region()) } else { None };
        let disk = region.unwrap_or_else(|| Region::inscribed(w, h));
        let out = stubs::edit_region(&img, region, s).unwrap().unwrap();
        assert_eq!(out.pixels, oracle::edit_region(&img.pixels, &bg, w as usize, (disk.cx, disk.cy, disk.r), s));

        let out = stubs::edit_global(&img, s).unwrap().unwrap();
        assert_eq!(out.pixels, oracle::edit_global(&img.pixels, w as usize, h as usize, s));
        assert_eq!(stubs::box_blur(&img.pixels, w as usize, h as usize), oracle::blur(&img.pixels, w as usize, h as usize));
    }
}

#[test]
fn lesions_are_brighter_than_their_surroundings() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let lesion = random_lesion(&mut rng, 64, 64);
        let scene = SyntheticScene::new(rng.gen(), 64, 64, Some(lesion)).unwrap();
        let px = scene.render();
        let mask = lesion.region().mask(64, 64);
        let mean = |inside: bool| {
            let v: Vec<f64> = px.iter().zip(&mask).filter(|(_, &m)| m == inside).map(|(&p, _)| f64::from(p)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false));
    }
}

#[test]
fn full_strength_region_edit_restores_the_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let seed = rng.gen();
        let lesion = random_lesion(&mut rng, 48, 48);
        let scene = SyntheticScene::new(seed, 48, 48, Some(lesion)).unwrap();
        let out = stubs::edit_region(&scene.to_artifact(), Some(lesion.region()), 1.0).unwrap().unwrap();
        let bg = scene.render_background();
        for (i, (&p, &b)) in out.pixels.iter().zip(&bg).enumerate() {
            if lesion.region().contains(i % 48, i / 48) {
                assert!((p - b).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn stronger_edits_move_further() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for _ in 0..30 {
        let lesion = random_lesion(&mut rng, 48, 48);
        let img = SyntheticScene::new(rng.gen(), 48, 48, Some(lesion)).unwrap().to_artifact();
        let plane = Plane::new(48, 48, &img.pixels);
        let mut last_sip = -1.0;
        let mut last_score = f64::INFINITY;
        for &s in &grid {
            let out = stubs::edit_region(&img, Some(lesion.region()), s).unwrap().unwrap_or_else(|| img.clone());
            let sip = metrics::sip(plane, Plane::new(48, 48, &out.pixels)).unwrap();
            let score = stubs::classify(&out.pixels);
            assert!(sip >= last_sip);
            assert!(score <= last_score + 1e-12);
            last_sip = sip;
            last_score = score;
        }
    }
}

#[test]
fn reports_name_the_right_quadrant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let lesion = random_lesion(&mut rng, 64, 64);
        let img = SyntheticScene::new(rng.gen(), 64, 64, Some(lesion)).unwrap().to_artifact();
        let rep = stubs::report(&img).unwrap();
        let vertical = if lesion.cy < 32.0 { "upper" } else { "lower" };
        let horizontal = if lesion.cx < 32.0 { "left" } else { "right" };
        assert_eq!(rep.findings, format!("lesion in {vertical}-{horizontal} quadrant"));
        assert_eq!(rep.region, Some(lesion.region()));
    }
    let clean = SyntheticScene::new(3, 32, 32, None).unwrap().to_artifact();
    assert_eq!(stubs::report(&clean).unwrap().findings, stubs::NO_FINDING);
}

#[test]
fn bright_lesions_are_mostly_segmented() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let mut lesion = random_lesion(&mut rng, 64, 64);
        lesion.a = rng.gen_range(0.4..0.7);
        let img = SyntheticScene::new(rng.gen(), 64, 64, Some(lesion)).unwrap().to_artifact();
        let mask = stubs::segment(&img);
        let disk = lesion.region().mask(64, 64);
        let hits = mask.pixels.iter().zip(&disk).filter(|(&m, &d)| d && m == 1.0).count();
        let total = disk.iter().filter(|&&d| d).count();
        assert!(hits * 2 >= total, "{hits}/{total}");
    }
}
