use mico::eval::{
    beam_decode, exhaustive_decode, greedy_decode, log_softmax, rank_of, recall_at, rerank_top_k, retrieval_rank,
    retrieval_report, sequence_log_prob, Direction, Scorer,
};
use mico::rng::keyed_rng;
use mico_autodiff::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Next-token distribution drawn from a stream keyed by the whole prefix.
pub struct TableScorer {
    pub seed: u64,
    pub vocab: usize,
    pub sharpness: f64,
}

impl Scorer for TableScorer {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn log_probs(&mut self, prefix: &[u32]) -> mico::Result<Vec<f64>> {
        let mut key = vec![self.seed];
        key.extend(prefix.iter().map(|&t| t as u64 + 1));
        let mut rng = keyed_rng(&key);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| self.sharpness * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(log_softmax(&logits))
    }
}

fn matrix(rows: &[Vec<f32>]) -> Tensor<f32> {
    Tensor::from_rows(rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ranking_matches_brute_force(
        (q, g) in (1usize..6, 1usize..9, 1usize..5).prop_flat_map(|(nq, ng, d)| (
            prop::collection::vec(prop::collection::vec(-4i8..4, d), nq),
            prop::collection::vec(prop::collection::vec(-4i8..4, d), ng),
        )),
        tau in 0.1f64..10.0,
    ) {
        let qf: Vec<Vec<f32>> = q.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
        let gf: Vec<Vec<f32>> = g.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
        let ranked = retrieval_rank(&matrix(&qf), &matrix(&gf), tau).unwrap();
        for (qi, order) in ranked.iter().enumerate() {
            let score = |j: usize| qf[qi].iter().zip(&gf[j]).map(|(a, b)| (a * b) as f64).sum::<f64>();
            let mut expect: Vec<usize> = (0..gf.len()).collect();
            // integer dot products are exact, so ties are genuine and go to the smaller index
            expect.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(order, &expect);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(0usize..50, 1..40)) {
        let r: Vec<f64> = (0..=51).map(|k| recall_at(&ranks, k)).collect();
        prop_assert_eq!(r[0], 0.0);
        prop_assert_eq!(r[51], 1.0);
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn oracle_rerank_never_hurts_and_respects_k(
        n in 2usize..40,
        k in 1usize..60,
        seed in any::<u64>(),
    ) {
        let mut rng = keyed_rng(&[seed]);
        let q: Vec<Vec<f32>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let g: Vec<Vec<f32>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut oracle = |qi: usize, cands: &[usize]| -> mico::Result<Vec<f64>> {
            Ok(cands.iter().map(|&c| if c == qi { 1.0 } else { 0.0 }).collect())
        };
        let rep = retrieval_report("T-I", Direction::TextToKnowledge, &matrix(&q), &matrix(&g), 1.0, k, Some(&mut oracle)).unwrap();
        prop_assert!(rep.post.r1 >= rep.pre.r1);
        for (&pre, &post) in rep.ranks_pre.iter().zip(&rep.ranks_post) {
            if pre < k { prop_assert_eq!(post, 0); } else { prop_assert_eq!(post, pre); }
        }
    }

    #[test]
    fn rerank_touches_only_the_head(
        scores in prop::collection::vec(-5.0f64..5.0, 1..30),
        k in 0usize..35,
    ) {
        let order: Vec<usize> = (0..scores.len()).rev().collect();
        let rr = rerank_top_k(&order, k, |c| scores[c]);
        let cut = k.min(order.len());
        prop_assert_eq!(&rr[cut..], &order[cut..]);
        let mut head = rr[..cut].to_vec();
        prop_assert!(head.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
        head.sort_unstable();
        let mut want = order[..cut].to_vec();
        want.sort_unstable();
        prop_assert_eq!(head, want);
        if k == 1 {
            prop_assert_eq!(&rr, &order);
        }
    }

    #[test]
    fn covering_beam_finds_the_optimum(seed in any::<u64>(), vocab in 2usize..5, len in 1usize..4) {
        let mut s = TableScorer { seed, vocab, sharpness: 2.0 };
        let exact = exhaustive_decode(&mut s, &[], None, len).unwrap();
        let wide = beam_decode(&mut s, &[], None, vocab.pow(len as u32), len).unwrap();
        prop_assert_eq!(&wide.tokens, &exact.tokens);
        prop_assert!((wide.log_prob - exact.log_prob).abs() < 1e-12);
        let lp = sequence_log_prob(&mut s, &[], &exact.tokens).unwrap();
        prop_assert!((lp - exact.log_prob).abs() < 1e-12);
        let one = beam_decode(&mut s, &[], None, 1, len).unwrap();
        prop_assert_eq!(one, greedy_decode(&mut s, &[], None, len).unwrap());
        let three = beam_decode(&mut s, &[], None, 3, len).unwrap();
        prop_assert!(three.log_prob <= exact.log_prob + 1e-12);
    }
}

#[test]
fn rank_of_missing_is_past_the_end() {
    assert_eq!(rank_of(&[2, 0, 1], 1), 2);
    assert_eq!(rank_of(&[2, 0], 1), 2);
}
