use dslab_core::pairs::{
    apply_sampling, build_pairs, score_captions, synth_instructions, CaptionSource, FnEmbedder, InstructionKind,
    Role, TrainingPair,
};
use dslab_core::scene::{generate_scenes, DepthImage, SceneGenConfig, SceneRecord};
use proptest::prelude::*;

fn scenes(n: usize) -> Vec<SceneRecord> {
    generate_scenes(31, n, &SceneGenConfig::default(), 4).unwrap()
}

fn oracle_mean(rec: &SceneRecord, i: usize) -> f64 {
    let img = &rec.image;
    let (mut s, mut n) = (0.0, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            if rec.objects[i].mask.contains(&((y * img.width + x) as u32)) {
                s += img.at(x, y);
                n += 1;
            }
        }
    }
    s / n as f64
}

#[test]
fn thousand_scene_pair_sweep() {
    let scenes = scenes(1000);
    let pairs = build_pairs(&scenes, &CaptionSource::SceneCaption).unwrap();
    let expected: usize = scenes.iter().map(|s| s.objects.len().max(1)).sum();
    assert_eq!(pairs.len(), expected);
    for p in &pairs {
        p.validate().unwrap();
        assert!(!p.replaced);
        let rec = scenes.iter().find(|s| s.scene_id == p.scene_id).unwrap();
        let i = p.object_index.unwrap();
        let ones: Vec<u32> = (0..p.mask.len() as u32).filter(|&k| p.mask[k as usize] == 1).collect();
        assert_eq!(ones, rec.objects[i].mask);
        assert_eq!(p.record().resolve(rec).unwrap(), *p);
    }
    let first = scenes.iter().find(|s| s.objects.len() >= 3).unwrap();
    let own: Vec<&TrainingPair> = pairs.iter().filter(|p| p.scene_id == first.scene_id).collect();
    assert!(own.iter().all(|p| p.caption == own[0].caption));
}

fn many_pairs(n: usize) -> Vec<TrainingPair> {
    let img = DepthImage::new(4, 4, vec![2.0; 16], 10.0).unwrap();
    (0..n)
        .map(|i| TrainingPair {
            scene_id: format!("s{i}"),
            object_index: Some(0),
            depth: img.clone(),
            mask: (0..16).map(|k| u8::from(k % 3 == 0)).collect(),
            caption: format!("caption {i}"),
            replaced: false,
        })
        .collect()
}

#[test]
fn replaced_fraction_at_one_tenth() {
    let pairs = many_pairs(10_000);
    let out = apply_sampling(&pairs, 0.1, 2024).unwrap();
    let frac = out.iter().filter(|p| p.replaced).count() as f64 / 10_000.0;
    assert!((0.09..=0.11).contains(&frac), "{frac}");
    for (a, b) in pairs.iter().zip(&out) {
        b.validate().unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.scene_id, b.scene_id);
        if !b.replaced {
            assert_eq!(a.mask, b.mask);
        }
    }
}

#[test]
fn extreme_ratios_are_exact() {
    let pairs = many_pairs(500);
    assert_eq!(apply_sampling(&pairs, 0.0, 1).unwrap(), pairs);
    let all = apply_sampling(&pairs, 1.0, 1).unwrap();
    assert!(all.iter().all(|p| p.replaced && p.mask.iter().all(|&m| m == 1)));
}

#[test]
fn replaced_set_depends_only_on_seed_and_length() {
    let a = many_pairs(300);
    let mut b = many_pairs(300);
    for p in &mut b {
        p.caption.push_str(" changed");
    }
    let idx = |v: &[TrainingPair]| -> Vec<usize> { (0..v.len()).filter(|&i| v[i].replaced).collect() };
    let ra = apply_sampling(&a, 0.3, 9).unwrap();
    let rb = apply_sampling(&b, 0.3, 9).unwrap();
    assert_eq!(idx(&ra), idx(&rb));
    assert_ne!(idx(&ra), idx(&apply_sampling(&a, 0.3, 10).unwrap()));
}

#[test]
fn instruction_depth_claims_match_pixel_loop() {
    let scenes = scenes(300);
    let mut kinds = [0usize; 3];
    for rec in &scenes {
        let samples = synth_instructions(rec, 5).unwrap();
        assert_eq!(samples, synth_instructions(rec, 5).unwrap());
        for s in &samples {
            for (k, t) in s.turns.iter().enumerate() {
                assert_eq!(t.role, if k % 2 == 0 { Role::User } else { Role::Assistant });
            }
            match s.kind {
                InstructionKind::DetailedDescription => {
                    kinds[0] += 1;
                    assert_eq!(s.user_turns(), 1);
                    let text = &s.turns[1].text;
                    assert!(text.contains(&rec.scene_label));
                    if rec.objects.len() >= 2 {
                        let order = text.split("from near to far: ").nth(1).unwrap().trim_end_matches('.');
                        let labels: Vec<&str> = order.split(", ").collect();
                        let mut by_depth: Vec<usize> = (0..rec.objects.len()).collect();
                        by_depth.sort_by(|&a, &b| oracle_mean(rec, a).total_cmp(&oracle_mean(rec, b)));
                        for w in by_depth.windows(2) {
                            assert!(oracle_mean(rec, w[0]) <= oracle_mean(rec, w[1]));
                        }
                        let want: Vec<&str> = by_depth.iter().map(|&i| rec.objects[i].label.as_str()).collect();
                        assert_eq!(labels, want, "{}", rec.scene_id);
                    }
                }
                InstructionKind::ComplexReasoning => {
                    kinds[1] += 1;
                    assert_eq!(s.user_turns(), 1);
                    let closer = s.turns[1].text.trim_end_matches(" is closer to the camera.");
                    let (i, j) = refs_in(rec, &s.turns[0].text);
                    let near = if oracle_mean(rec, i) < oracle_mean(rec, j) { i } else { j };
                    assert_eq!(closer, rec.object_ref(near));
                }
                InstructionKind::MultiRoundDialogue => {
                    kinds[2] += 1;
                    assert!(s.user_turns() >= 2);
                    let farther = s.turns[3].text.trim_end_matches(" is farther from the camera.");
                    let (i, j) = refs_in(rec, &s.turns[2].text);
                    let far = if oracle_mean(rec, i) > oracle_mean(rec, j) { i } else { j };
                    assert_eq!(farther, rec.object_ref(far));
                }
            }
        }
    }
    assert!(kinds.iter().all(|&k| k > 100), "{kinds:?}");
}

/// The two object indices whose references appear in `text`.
fn refs_in(rec: &SceneRecord, text: &str) -> (usize, usize) {
    let hits: Vec<usize> = (0..rec.objects.len()).filter(|&i| text.contains(&rec.object_ref(i))).collect();
    assert_eq!(hits.len(), 2, "{text}");
    (hits[0], hits[1])
}

proptest! {
    #[test]
    fn caption_choice_survives_rescaling(
        t in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 3),
        d in prop::collection::vec(-1.0f64..1.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let rec = SceneRecord {
            scene_id: "s".into(),
            scene_label: "kitchen".into(),
            image: DepthImage::new(1, 1, vec![1.0], 10.0).unwrap(),
            objects: vec![],
            captions: vec!["0".into(), "1".into(), "2".into()],
        };
        let base = FnEmbedder {
            text: |c: &str| t[c.parse::<usize>().unwrap()].clone(),
            depth: |_: &DepthImage| d.clone(),
        };
        let scaled = FnEmbedder {
            text: |c: &str| t[c.parse::<usize>().unwrap()].iter().map(|x| x * a).collect(),
            depth: |_: &DepthImage| d.iter().map(|x| x * b).collect(),
        };
        let s0 = score_captions(&rec, &base).unwrap();
        let s1 = score_captions(&rec, &scaled).unwrap();
        for (x, y) in s0.scores.iter().zip(&s1.scores) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(s0.best, s1.best);
    }
}
