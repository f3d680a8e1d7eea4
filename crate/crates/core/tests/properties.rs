mod common;

use std::cell::RefCell;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use streamforge::conditions::{filter_conditions, Thresholds};
use streamforge::diffusion::{cfg_combine, MultimodalCondition};
use streamforge::eval::{gaussian_frechet, sync_metric, zscore_percentiles, GaussianSummary};
use streamforge::rng::seeded;
use streamforge::streaming::{AHISCache, AudioWindower, ContextCache, WindowSpec};
use streamforge::student::{KVEntry, OracleStudent, SampleMode};
use streamforge::{Frames, Result};

fn entry(j: usize, v: f64) -> KVEntry {
    KVEntry {
        block_index: j,
        feature: Frames::from_fn(3, 2, |r, c| v + (r * 2 + c) as f64),
    }
}

/// Cache wrapper that records every insert and context read.
struct Spy<C> {
    inner: C,
    inserted: RefCell<Vec<KVEntry>>,
    largest_read: RefCell<usize>,
}

impl<C: ContextCache> ContextCache for Spy<C> {
    fn insert(&mut self, e: KVEntry) -> Result<()> {
        self.inserted.borrow_mut().push(e.clone());
        self.inner.insert(e)
    }

    fn context(&self) -> Vec<KVEntry> {
        let c = self.inner.context();
        let mut m = self.largest_read.borrow_mut();
        *m = (*m).max(c.len());
        c
    }

    fn len(&self) -> usize {
        self.inner.len()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinks_are_immutable_and_budget_holds(
        sinks in 0usize..5,
        rolling in 0usize..5,
        gaps in prop::collection::vec(1usize..4, 1..40),
    ) {
        let mut cache = AHISCache::new(sinks, rolling);
        let mut j = 0;
        let mut first_sinks: Option<Vec<KVEntry>> = None;
        let mut inserted = Vec::new();
        for (n, g) in gaps.iter().enumerate() {
            j += g;
            cache.insert(entry(j, n as f64)).unwrap();
            inserted.push(j);
            prop_assert!(cache.len() <= sinks + rolling);
            let ctx = cache.context();
            prop_assert!(ctx.windows(2).all(|w| w[0].block_index < w[1].block_index));
            if cache.sinks().len() == sinks {
                match &first_sinks {
                    None => first_sinks = Some(cache.sinks().to_vec()),
                    Some(s) => prop_assert_eq!(s.as_slice(), cache.sinks()),
                }
            }
            // sinks are the first inserts, rolling the latest ones
            let want: Vec<usize> = inserted.iter().take(sinks).copied().chain(
                inserted.iter().skip(sinks).rev().take(rolling).rev().copied(),
            ).collect();
            let got: Vec<usize> = ctx.iter().map(|e| e.block_index).collect();
            prop_assert_eq!(got, want);
        }
        prop_assert!(cache.insert(entry(j, 0.0)).is_err());
    }

    #[test]
    fn readiness_is_monotone(
        chunks in prop::collection::vec(0usize..5, 0..20),
        pre in 0usize..4,
        look in 0usize..4,
    ) {
        let spec = WindowSpec { frames_per_block: 3, pre_context: pre, look_ahead: look };
        let mut w = AudioWindower::new(spec).unwrap();
        let blocks = 12;
        let mut ready = vec![false; blocks];
        let mut check = |w: &AudioWindower| -> std::result::Result<(), TestCaseError> {
            for (j, r) in ready.iter_mut().enumerate() {
                let now = w.is_ready(j);
                prop_assert!(!*r || now, "block {} became unready", j);
                prop_assert_eq!(now, w.window(j).is_some());
                *r = now;
            }
            Ok(())
        };
        for n in chunks {
            w.push_slice(&vec![0.5; n]).unwrap();
            check(&w)?;
        }
        w.end_stream();
        check(&w)?;
        prop_assert!(ready.iter().all(|&r| r));
    }

    #[test]
    fn filter_is_an_order_preserving_partition(
        brightness in prop::collection::vec(-1.0f64..2.0, 0..30),
        snr_noise in prop::collection::vec(0.0f64..1.0, 30),
        t_b in -0.5f64..1.5,
        t_s in 0.0f64..20.0,
        raise_b in 0.0f64..1.0,
        raise_s in 0.0f64..10.0,
    ) {
        let list: Vec<MultimodalCondition> = brightness.iter().zip(&snr_noise).enumerate().map(|(i, (&b, &nv))| {
            let mut c = MultimodalCondition::new(
                vec![0.1 * i as f64, -0.2],
                vec![b + 0.1, b - 0.1],
                (0..6).map(|f| (f as f64 * 1.3 + i as f64).sin()).collect(),
            ).unwrap();
            c.audio_noise_var = 0.05 * nv;
            c
        }).collect();
        let t = Thresholds { min_brightness: t_b, min_sharpness: 0.0, min_snr_db: t_s };
        let out = filter_conditions(&list, &t);
        prop_assert_eq!(out.kept.len() + out.rejected.len(), list.len());
        let rejected: Vec<usize> = out.rejected.iter().map(|r| r.index).collect();
        prop_assert!(rejected.windows(2).all(|w| w[0] < w[1]));
        let kept: Vec<&MultimodalCondition> = list.iter().enumerate()
            .filter(|(i, _)| !rejected.contains(i)).map(|(_, c)| c).collect();
        prop_assert_eq!(kept, out.kept.iter().collect::<Vec<_>>());
        for r in &out.rejected {
            prop_assert_eq!(&r.condition, &list[r.index]);
            prop_assert!(!r.failed.is_empty());
        }

        let stricter = Thresholds { min_brightness: t_b + raise_b, min_sharpness: 0.0, min_snr_db: t_s + raise_s };
        let tight = filter_conditions(&list, &stricter);
        prop_assert!(tight.kept.iter().all(|c| out.kept.contains(c)));
    }

    #[test]
    fn frechet_grows_with_mean_separation(seed in 0u64..1000, s1 in 0.0f64..3.0, ds in 0.01f64..3.0) {
        let mut rng = seeded(seed);
        let spd = |rng: &mut _| {
            let a = DMatrix::from_vec(3, 3, streamforge::rng::gaussian_vec(rng, 9));
            &a * a.transpose() + DMatrix::identity(3, 3) * 0.1
        };
        let (c1, c2) = (spd(&mut rng), spd(&mut rng));
        let dir = streamforge::rng::gaussian_vec(&mut rng, 3);
        let at = |s: f64| GaussianSummary::new(dir.iter().map(|v| s * v).collect(), c2.clone(), 0).unwrap();
        let base = GaussianSummary::new(vec![0.0; 3], c1.clone(), 0).unwrap();
        let near = gaussian_frechet(&base, &at(s1)).unwrap();
        let far = gaussian_frechet(&base, &at(s1 + ds)).unwrap();
        prop_assert!(far > near);
        let self_d = gaussian_frechet(&base, &base).unwrap();
        prop_assert!(self_d.abs() < 1e-9);
    }

    #[test]
    fn sync_offset_follows_the_delay(seed in 0u64..10_000, k in -3i64..=3) {
        let mut rng = seeded(seed);
        let n = 40;
        let audio = streamforge::rng::gaussian_vec(&mut rng, n);
        let filler = streamforge::rng::gaussian_vec(&mut rng, n);
        let motion: Vec<f64> = (0..n as i64).map(|t| {
            let s = t - k;
            if (0..n as i64).contains(&s) { audio[s as usize] } else { filler[t as usize] }
        }).collect();
        prop_assert_eq!(sync_metric(&audio, &audio, 3).unwrap().offset, 0);
        prop_assert_eq!(sync_metric(&audio, &motion, 3).unwrap().offset, k);
    }

    #[test]
    fn percentiles_are_monotone_in_score(scores in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..10), 1..5)) {
        let rep = zscore_percentiles(&scores);
        let pairs: Vec<(f64, f64)> = scores.iter().flatten().copied()
            .zip(rep.percentiles.iter().flatten().copied()).collect();
        for a in &pairs {
            for b in &pairs {
                if a.0 < b.0 {
                    prop_assert!(a.1 <= b.1);
                }
            }
        }
    }

    #[test]
    fn guidance_of_identical_predictions_is_identity(v in prop::collection::vec(-3.0f64..3.0, 6), scales in prop::collection::vec(-2.0f64..8.0, 1..4)) {
        let p = Frames::from_vec(3, 2, v).unwrap();
        let preds = vec![p.clone(); scales.len()];
        let out = cfg_combine(&p, &preds, &scales).unwrap();
        prop_assert!(out.max_abs_diff(&p) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_audio_never_changes_earlier_blocks(seed in 0u64..1000, j in 0usize..7, bump in 0.1f64..5.0) {
        let world = small_world(3, 21);
        let sched = schedule();
        let s = sampler(&sched, 4, 3, 3, SampleMode::Stochastic);
        let gen = random_student(seed, 4, 3, 2);
        let oracle = OracleStudent::new(&world, &sched);
        let c = random_cond(seed + 1, 2, 21);
        let mut audio = c.audio.clone();
        for a in &mut audio[j * 3..] {
            *a += bump;
        }
        let c2 = c.with_audio(audio);
        let models: [&dyn streamforge::student::BlockPredictor; 2] = [&gen, &oracle];
        for m in models {
            let run = |c: &MultimodalCondition| {
                let mut cache = AHISCache::new(3, 2);
                s.rollout(m, c, 7, &mut cache, &mut seeded(seed)).unwrap().into_frames()
            };
            let (a, b) = (run(&c), run(&c2));
            prop_assert_eq!(a.slice_rows(0, j * 3), b.slice_rows(0, j * 3));
            prop_assert!(a.slice_rows(j * 3, 3) != b.slice_rows(j * 3, 3));
        }
    }

    #[test]
    fn cache_holds_clean_final_predictions(seed in 0u64..1000, blocks in 1usize..12) {
        let sched = schedule();
        let s = sampler(&sched, 4, 3, 2, SampleMode::Deterministic);
        let gen = random_student(seed, 4, 2, 2);
        let c = random_cond(seed, 2, blocks * 3);
        let mut spy = Spy { inner: AHISCache::new(3, 2), inserted: RefCell::new(Vec::new()), largest_read: RefCell::new(0) };
        let trace = s.rollout_traced(&gen, &c, blocks, &mut spy, &mut seeded(seed)).unwrap();
        let inserted = spy.inserted.borrow();
        prop_assert_eq!(inserted.len(), blocks);
        for (j, e) in inserted.iter().enumerate() {
            prop_assert_eq!(e.block_index, j);
            prop_assert_eq!(&e.feature, trace.blocks[j].preds.last().unwrap());
            prop_assert_eq!(&e.feature, &trace.video.block(j));
        }
        prop_assert!(*spy.largest_read.borrow() <= 5);
        prop_assert!(trace.contexts.iter().all(|c| c.len() <= 5));
    }
}
