use casnet::corpus::{apply_channel, ChannelProfile, Waveform};
use casnet::objectives::{pit_loss, si_snr, total_loss};
use proptest::prelude::*;

fn w(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 8000)
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len).prop_filter("non-silent", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

/// Every assignment of `n` estimates to targets, built by insertion so it
/// shares no code with the library's enumeration.
fn all_perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn si_snr_is_scale_invariant(t in signal(64), noise in signal(64), a in 1e-4f64..1e4) {
        let e: Vec<f64> = t.iter().zip(&noise).map(|(x, n)| x + 0.3 * n).collect();
        let base = si_snr(&w(e.clone()), &w(t.clone())).unwrap();
        let scaled = si_snr(&w(e.iter().map(|v| v * a).collect()), &w(t)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
    }

    #[test]
    fn pit_matches_brute_force(n in 2usize..=3, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| w((0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let est: Vec<Waveform> = (0..n).map(|_| mk(&mut rng)).collect();
        let tgt: Vec<Waveform> = (0..n).map(|_| mk(&mut rng)).collect();
        let (loss, perm) = pit_loss(&est, &tgt).unwrap();
        let best = all_perms(n)
            .into_iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| si_snr(&est[i], &tgt[j]).unwrap()).sum::<f64>() / n as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(loss, -best);
        let chosen = perm.iter().enumerate().map(|(i, &j)| si_snr(&est[i], &tgt[j]).unwrap()).sum::<f64>() / n as f64;
        prop_assert_eq!(chosen, best);
    }

    #[test]
    fn pit_ignores_estimate_order(a in signal(40), b in signal(40), c in signal(40), d in signal(40)) {
        let tgt = [w(c), w(d)];
        let (l1, p1) = pit_loss(&[w(a.clone()), w(b.clone())], &tgt).unwrap();
        let (l2, p2) = pit_loss(&[w(b), w(a)], &tgt).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        prop_assert_eq!(p1[0], p2[1]);
    }

    #[test]
    fn total_loss_is_linear_in_gamma(l_rc in -30.0f64..30.0, l_ci in 0.0f64..5.0, g1 in 0.0f64..2.0, g2 in 0.0f64..2.0) {
        let a = total_loss(l_rc, l_ci, g1).unwrap().l_total;
        let b = total_loss(l_rc, l_ci, g2).unwrap().l_total;
        prop_assert!(((b - a) - (g2 - g1) * l_ci).abs() < 1e-9);
        prop_assert_eq!(total_loss(l_rc, l_ci, 0.0).unwrap().l_total, l_rc);
    }

    #[test]
    fn apply_channel_keeps_length(
        x in prop::collection::vec(-1.0f64..1.0, 1..300),
        taps in prop::collection::vec(-1.0f64..1.0, 1..=64),
        gain_db in -20.0f64..20.0,
        noise in prop::option::of(-60.0f64..-10.0),
        clip in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let p = ChannelProfile { channel_id: 0, name: "p".into(), fir_taps: taps, gain_db, noise_floor_db: noise, clip_threshold: clip, seed };
        let y = apply_channel(&w(x.clone()), &p);
        prop_assert_eq!(y.len(), x.len());
        prop_assert!(y.peak() <= clip);
    }
}
