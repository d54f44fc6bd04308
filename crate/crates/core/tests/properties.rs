use csmpq::allocator::{importance, solve_lp, BitRange, Budget, LayerProfile};
use csmpq::separability::{score_layer, select_words, term_frequency, PooledFeatures};
use proptest::prelude::*;

fn features() -> impl Strategy<Value = PooledFeatures> {
    (1usize..12, 1usize..12).prop_flat_map(|(c, n)| {
        prop::collection::vec(prop::collection::vec(0.0f64..5.0, n), c)
            .prop_map(|rows| PooledFeatures::from_rows("p", &rows).unwrap())
    })
}

fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<LayerProfile>, f64)> {
    (1usize..8).prop_flat_map(|layers| {
        (
            prop::collection::vec(0.0f64..1.0, layers),
            prop::collection::vec((1u64..10_000, 0u64..50_000), layers),
            0.0f64..1.2,
        )
            .prop_map(|(alpha, counts, frac)| {
                let profiles = counts
                    .into_iter()
                    .enumerate()
                    .map(|(i, (p, m))| LayerProfile {
                        layer_id: format!("l{i}"),
                        param_count: p,
                        mac_count: m,
                        pinned_bits: None,
                    })
                    .collect();
                (alpha, profiles, frac)
            })
    })
}

fn size_budget(profiles: &[LayerProfile], range: BitRange, frac: f64) -> Budget {
    let params: u64 = profiles.iter().map(|p| p.param_count).sum();
    let lo = params as f64 * range.min as f64 / 8.0;
    let hi = params as f64 * range.max as f64 / 8.0;
    Budget::size_bytes(lo + frac * (hi - lo), 8)
}

proptest! {
    #[test]
    fn tfidf_nonzero_only_on_words(p in features()) {
        let s = score_layer(&p);
        for i in 0..p.c_out() {
            for j in 0..p.n_images() {
                if s.tfidf_star.get(i, j) != 0.0 {
                    prop_assert!(s.words.contains(i, j));
                }
                if !s.words.contains(i, j) {
                    prop_assert_eq!(s.tf_star.get(i, j), 0.0);
                }
                let prod = s.tf_star.get(i, j) * s.idf_star[i];
                prop_assert!((s.tfidf_star.get(i, j) - prod).abs() <= 1e-12);
            }
        }
        prop_assert!(s.alpha >= 0.0);
    }

    #[test]
    fn zero_idf_gives_zero_alpha(c in 1usize..6, n in 1usize..6, v in 0.1f64..3.0) {
        // Constant columns select every feature in every image.
        let rows = vec![vec![v; n]; c];
        let s = score_layer(&PooledFeatures::from_rows("p", &rows).unwrap());
        prop_assert!(s.idf_star.iter().all(|&x| x == 0.0));
        prop_assert_eq!(s.alpha, 0.0);
    }

    #[test]
    fn tf_scale_invariant_per_image(p in features(), c in 0.1f64..10.0) {
        let j = p.n_images() - 1;
        let q = p.scale_image(j, c);
        prop_assert_eq!(select_words(&p), select_words(&q));
        let w = select_words(&p);
        let (a, b) = (term_frequency(&p, &w).unwrap(), term_frequency(&q, &w).unwrap());
        for i in 0..p.c_out() {
            let (x, y) = (a.get(i, j), b.get(i, j));
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-3));
        }
    }

    #[test]
    fn lp_is_feasible_and_deterministic((alpha, profiles, frac) in problem(), beta in 0.0f64..5.0) {
        let range = BitRange::new(2, 8).unwrap();
        let theta = importance(&alpha, beta).unwrap();
        let budget = size_budget(&profiles, range, frac);
        let a = solve_lp(&theta, &profiles, &budget, range).unwrap();
        let b = solve_lp(&theta, &profiles, &budget, range).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.feasible);
        prop_assert!(budget.admits(a.size_bytes));
        prop_assert!(a.bits.iter().all(|b| (2..=8).contains(b)));
    }

    #[test]
    fn higher_density_gets_at_least_as_many_bits((alpha, profiles, frac) in problem(), beta in 0.0f64..5.0) {
        let range = BitRange::new(2, 8).unwrap();
        let theta = importance(&alpha, beta).unwrap();
        let budget = size_budget(&profiles, range, frac);
        let c = solve_lp(&theta, &profiles, &budget, range).unwrap();
        let density: Vec<f64> = profiles.iter().zip(&theta.theta).map(|(p, t)| t / budget.cost_per_bit(p)).collect();
        for a in 0..profiles.len() {
            for b in 0..profiles.len() {
                if density[a] > density[b] {
                    prop_assert!(c.bits[a] >= c.bits[b], "density {:?} bits {:?}", density, c.bits);
                }
            }
        }
    }

    #[test]
    fn reparameterized_beta_gives_same_allocation((alpha, profiles, frac) in problem(), k in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25])) {
        // Powers of two keep beta * alpha bit-identical.
        let range = BitRange::new(4, 8).unwrap();
        let budget = size_budget(&profiles, range, frac);
        let scaled: Vec<f64> = alpha.iter().map(|a| a * k).collect();
        let t1 = importance(&alpha, 1.5).unwrap();
        let t2 = importance(&scaled, 1.5 / k).unwrap();
        prop_assert_eq!(&t1.theta, &t2.theta);
        prop_assert_eq!(
            solve_lp(&t1, &profiles, &budget, range).unwrap(),
            solve_lp(&t2, &profiles, &budget, range).unwrap()
        );
    }
}
