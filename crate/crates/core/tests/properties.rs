mod common;

use common::*;
use deepcrf::data::{make_folds, segment_word_image, normalize_character, PixelGrid};
use deepcrf::eval::word_error_rate;
use deepcrf::math::sigmoid;
use deepcrf::{ChainMarginals, Dataset, LabelAlphabet, LabeledSequence, Rbm, WordImage};
use proptest::prelude::*;
use rand::Rng;

fn instance(seed: u64, k: usize, t: usize, d_h: usize) -> (deepcrf::CrfParams, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let p = random_crf(&mut r, d_h, k);
    let h = random_features(&mut r, t, d_h);
    (p, h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequence_probabilities_sum_to_one(seed: u64, k in 1usize..=3, t in 1usize..=5) {
        let (p, h) = instance(seed, k, t, 3);
        let log_z = p.log_partition(&h).unwrap();
        let total: f64 = all_sequences(k, t)
            .iter()
            .map(|y| (p.energy(&h, y).unwrap() - log_z).exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn viterbi_beats_random_labelings(seed: u64, k in 2usize..=6, t in 1usize..=10) {
        let (p, h) = instance(seed, k, t, 4);
        let best = p.viterbi(&h).unwrap();
        prop_assert!((best.score - energy(&p, &h, &best.labels)).abs() < 1e-9);
        let mut r = rng(seed ^ 0x5eed);
        for _ in 0..1000 {
            let y = random_labels(&mut r, t, k);
            prop_assert!(best.score >= p.energy(&h, &y).unwrap() - 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_agree_on_log_z(seed: u64, k in 1usize..=8, t in 1usize..=12) {
        let (p, h) = instance(seed, k, t, 5);
        let a = p.log_partition(&h).unwrap();
        let b = p.marginals(&h).unwrap().log_z;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn marginals_normalize_and_agree(seed: u64, k in 1usize..=8, t in 1usize..=12) {
        let (p, h) = instance(seed, k, t, 5);
        let m = p.marginals(&h).unwrap();
        for row in &m.gamma {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (s, xi) in m.xi.iter().enumerate() {
            prop_assert!((xi.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k {
                let row: f64 = (0..k).map(|j| xi.get(i, j)).sum();
                let col: f64 = (0..k).map(|j| xi.get(j, i)).sum();
                prop_assert!((row - m.gamma[s][i]).abs() < 1e-10);
                prop_assert!((col - m.gamma[s + 1][i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bias_shift_moves_log_z_only(seed: u64, k in 2usize..=6, t in 1usize..=8, c in -20.0f64..20.0) {
        let (p, h) = instance(seed, k, t, 3);
        let mut q = p.clone();
        q.bias.iter_mut().for_each(|b| *b += c);
        let (zp, zq) = (p.log_partition(&h).unwrap(), q.log_partition(&h).unwrap());
        prop_assert!((zq - zp - t as f64 * c).abs() < 1e-10 * zp.abs().max(1.0));
        prop_assert_eq!(p.decode(&h).unwrap(), q.decode(&h).unwrap());
        let (mp, mq) = (p.marginals(&h).unwrap(), q.marginals(&h).unwrap());
        for (a, b) in mp.gamma.iter().flatten().zip(mq.gamma.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn large_unaries_stay_finite(seed: u64, k in 2usize..=5, t in 1usize..=6) {
        let mut r = rng(seed);
        let mut p = random_crf(&mut r, 1, k);
        p.emission.as_mut_slice().iter_mut().for_each(|w| *w = w.signum() * 700.0);
        p.start.fill(0.0);
        p.end.fill(0.0);
        p.bias.fill(0.0);
        let h = vec![vec![1.0]; t];
        let m = p.marginals(&h).unwrap();
        prop_assert!(m.log_z.is_finite());
        prop_assert!(m.gamma.iter().flatten().all(|g| g.is_finite()));
    }

    #[test]
    fn hard_marginals_give_perceptron_update(seed: u64, k in 2usize..=5, t in 1usize..=6) {
        let (p, h) = instance(seed, k, t, 3);
        let mut r = rng(!seed);
        let y = random_labels(&mut r, t, k);
        let y_star = random_labels(&mut r, t, k);
        let a = p.perceptron_gradients(&h, &y, &y_star).unwrap();
        let b = p.expected_gradients(&h, &y, &ChainMarginals::hard(&y_star, k)).unwrap();
        prop_assert_eq!(a, b);
        if y == y_star {
            let z = p.perceptron_gradients(&h, &y, &y).unwrap();
            prop_assert!(z.emission.as_slice().iter().all(|&v| v == 0.0));
            prop_assert!(z.transitions.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval(z in -1e6f64..1e6) {
        let s = sigmoid(z);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn encoder_is_stateless_and_bounded(seed: u64, d in 1usize..=6, w1 in 1usize..=8, w2 in 1usize..=8) {
        let mut r = rng(seed);
        let enc = random_encoder(&mut r, d, &[w1, w2]);
        let x = normal_vec(&mut r, d);
        let (h1, t1) = enc.encode(&x).unwrap();
        let (h2, _) = enc.encode(&x).unwrap();
        prop_assert_eq!(&h1, &h2);
        prop_assert_eq!(&t1.activations[0], &x);
        for a in t1.activations.iter().skip(1).flatten() {
            prop_assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn encoder_backprop_matches_finite_differences(seed: u64, d in 1usize..=6, w1 in 1usize..=8, w2 in 1usize..=8) {
        let mut r = rng(seed);
        let enc = random_encoder(&mut r, d, &[w1, w2]);
        let x = normal_vec(&mut r, d);
        let target = normal_vec(&mut r, w2);
        let loss = |e: &deepcrf::EncoderStack| {
            let (h, _) = e.encode(&x).unwrap();
            0.5 * h.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let (h, trace) = enc.encode(&x).unwrap();
        let dl: Vec<f64> = h.iter().zip(&target).map(|(a, b)| a - b).collect();
        let grads = enc.backprop(&trace, &dl).unwrap();
        for (l, g) in grads.iter().enumerate() {
            for idx in 0..g.weights.as_slice().len() {
                let fd = central_diff(|v| {
                    let mut e = enc.clone();
                    e.layers_mut()[l].weights.as_mut_slice()[idx] = v;
                    loss(&e)
                }, enc.layers()[l].weights.as_slice()[idx], 1e-5);
                prop_assert!(rel_err(g.weights.as_slice()[idx], fd) < 1e-5);
            }
            for idx in 0..g.bias.len() {
                let fd = central_diff(|v| {
                    let mut e = enc.clone();
                    e.layers_mut()[l].bias[idx] = v;
                    loss(&e)
                }, enc.layers()[l].bias[idx], 1e-5);
                prop_assert!(rel_err(g.bias[idx], fd) < 1e-5);
            }
        }
    }

    #[test]
    fn rbm_probabilities_strictly_inside(seed: u64, nv in 1usize..=6, nh in 1usize..=6) {
        let mut r = rng(seed);
        let mut rbm = Rbm::zeros(nv, nh);
        rbm.weights.as_mut_slice().iter_mut().for_each(|w| *w = 50.0 * normal(&mut r));
        let v: Vec<f64> = (0..nv).map(|_| f64::from(r.random_range(0..2u8))).collect();
        let h = rbm.hidden_probs(&v).unwrap();
        prop_assert!(h.iter().all(|&p| p > 0.0 && p < 1.0));
        let back = rbm.visible_probs(&h).unwrap();
        prop_assert!(back.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn cd1_with_zero_rate_is_identity(seed: u64, nv in 1usize..=6, nh in 1usize..=6, n in 1usize..=5) {
        let mut r = rng(seed);
        let mut rbm = Rbm::random(nv, nh, &mut r);
        rbm.hidden_bias = normal_vec(&mut r, nh);
        let before = rbm.clone();
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..nv).map(|_| f64::from(r.random_range(0..2u8))).collect())
            .collect();
        let batch: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        rbm.cd1_step(&batch, 0.0, &mut r).unwrap();
        prop_assert_eq!(rbm, before);
    }

    #[test]
    fn seeded_folds_cover_exactly_once(n in 2usize..60, k_raw in 2usize..12, seed: u64) {
        let k = k_raw.min(n);
        let ds = tiny_dataset(n, false);
        let folds = make_folds(&ds, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0u32; n];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn canonical_format_round_trips(n in 1usize..20, seed: u64) {
        let mut r = rng(seed);
        let alphabet = LabelAlphabet::new(vec!['a', 'b', 'c']).unwrap();
        let sequences: Vec<LabeledSequence> = (0..n)
            .map(|i| {
                let t_len = r.random_range(1..6);
                LabeledSequence {
                    word_id: format!("w{i}"),
                    fold: if r.random_bool(0.5) { Some(r.random_range(0..10)) } else { None },
                    frames: (0..t_len).map(|_| (0..5).map(|_| r.random_range(0..2u8)).collect()).collect(),
                    labels: (0..t_len).map(|_| r.random_range(0..3)).collect(),
                }
            })
            .collect();
        let ds = Dataset::new(sequences, alphabet, 5).unwrap();
        let text = ds.to_canonical();
        let back = Dataset::parse_canonical(&text, "generated").unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_canonical(), text);
    }

    #[test]
    fn normalized_characters_are_binary(h in 1usize..90, w in 1usize..90, seed: u64) {
        let mut r = rng(seed);
        let pixels: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let v = normalize_character(&PixelGrid::new(h, w, pixels).unwrap());
        prop_assert_eq!(v.len(), 2600);
        prop_assert!(v.iter().all(|&b| b <= 1));
    }

    #[test]
    fn segments_tile_any_word(w in 1usize..200, n_raw in 1usize..20) {
        let n = n_raw.min(w);
        let img = WordImage {
            pixels: PixelGrid::from_fn(2, w, |_, c| c as f64 / w as f64).unwrap(),
            transcript: "x".repeat(n),
            source: "generated".into(),
        };
        let parts = segment_word_image(&img).unwrap();
        prop_assert_eq!(parts.len(), n);
        let widths: Vec<usize> = parts.iter().map(|p| p.width()).collect();
        prop_assert_eq!(widths.iter().sum::<usize>(), w);
        prop_assert!(widths.windows(2).all(|p| p[0] >= p[1] && p[0] - p[1] <= 1));
        let mut c = 0;
        for p in &parts {
            for j in 0..p.width() {
                prop_assert_eq!(p.get(1, j), img.pixels.get(1, c));
                c += 1;
            }
        }
    }

    #[test]
    fn word_error_ignores_word_order(seed: u64, n in 1usize..30) {
        let mut r = rng(seed);
        let gold: Vec<Vec<usize>> = (0..n).map(|_| {
                let t_len = r.random_range(1..5);
                random_labels(&mut r, t_len, 3)
            }).collect();
        let pred: Vec<Vec<usize>> = gold
            .iter()
            .map(|g| if r.random_bool(0.3) { random_labels(&mut r, g.len(), 3) } else { g.clone() })
            .collect();
        prop_assert_eq!(word_error_rate(&gold, &gold).unwrap(), 0.0);
        let e = word_error_rate(&pred, &gold).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let pp: Vec<_> = perm.iter().map(|&i| pred[i].clone()).collect();
        let gp: Vec<_> = perm.iter().map(|&i| gold[i].clone()).collect();
        prop_assert_eq!(word_error_rate(&pp, &gp).unwrap(), e);
        let wrong = pred.iter().zip(&gold).filter(|(p, g)| p.iter().zip(g.iter()).all(|(a, b)| a != b)).count();
        prop_assert!(e >= wrong as f64 / n as f64);
        prop_assert!((0.0..=1.0).contains(&e));
    }
}

fn tiny_dataset(n: usize, tagged: bool) -> Dataset {
    let sequences = (0..n)
        .map(|i| LabeledSequence {
            word_id: i.to_string(),
            fold: tagged.then_some(i % 3),
            frames: vec![vec![0, 1]],
            labels: vec![0],
        })
        .collect();
    Dataset::new(sequences, LabelAlphabet::new(vec!['a']).unwrap(), 2).unwrap()
}

#[test]
fn seeded_fold_membership_is_frozen() {
    let ds = tiny_dataset(7, false);
    let folds = make_folds(&ds, 5, 11).unwrap();
    let tests: Vec<Vec<usize>> = folds.iter().map(|f| f.test.clone()).collect();
    let sizes: Vec<usize> = tests.iter().map(Vec::len).collect();
    assert_eq!(sizes, [2, 2, 1, 1, 1]);
    assert_eq!(tests, FROZEN_FOLDS);
}

const FROZEN_FOLDS: [&[usize]; 5] = [&[3, 4], &[2, 5], &[1], &[6], &[0]];

#[test]
fn tagged_folds_follow_tags() {
    let ds = tiny_dataset(9, true);
    let folds = make_folds(&ds, 3, 99).unwrap();
    for (f, fold) in folds.iter().enumerate() {
        assert_eq!(fold.test, (0..9).filter(|i| i % 3 == f).collect::<Vec<_>>());
    }
}
