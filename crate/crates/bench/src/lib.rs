//! Shared fixtures for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certitext_core::model::build_network;
use certitext_core::nn::{Network, TokenId};
use certitext_core::perturb::{elementary_perturbations, PerturbationSet, SubstitutionTable};

pub struct Case {
    pub net: Network<f32>,
    pub tokens: Vec<TokenId>,
    pub table: SubstitutionTable,
    pub pset: PerturbationSet,
}

fn build(descriptor: &str, vocab: usize, len: usize, options: usize, delta: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_network(descriptor, 2, &mut rng).unwrap();
    let tokens: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let mut table = SubstitutionTable::new(vocab);
    for t in 0..vocab {
        let repls: Vec<TokenId> = (1..=options).map(|k| (t + k) % vocab).collect();
        table.add(t, &repls).unwrap();
    }
    let pset = elementary_perturbations(&tokens, &table, delta);
    Case {
        net,
        tokens,
        table,
        pset,
    }
}

/// 100-token sequence through a width-5 kernel with two replacements per
/// token: 200 elementary perturbations, the documented cost comparison.
pub fn cost_case(delta: usize) -> Case {
    build("embed:50:8|conv:16:5|relu|avgpool|linear:2", 50, 100, 2, delta, 1)
}

/// Small space a benchmark can enumerate exhaustively per iteration.
pub fn small_case(delta: usize) -> Case {
    build("embed:8:4|conv:6:3|relu|avgpool|linear:2", 8, 10, 1, delta, 2)
}
