//! Perturbation spaces: which tokens may be swapped for which, the simplex
//! vertices that over-approximate a substitution budget, exhaustive
//! enumeration of the concrete space, exact counting, and uniform sampling.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Embedding, TokenId};
use crate::tensor::{Scalar, Tensor};

/// Allowed replacements per token id. Replacement lists are sorted,
/// deduplicated, and never contain the token itself.
#[derive(Clone, Debug, Default)]
pub struct SubstitutionTable {
    rows: Vec<Vec<TokenId>>,
}

impl SubstitutionTable {
    pub fn new(vocab_size: usize) -> Self {
        SubstitutionTable {
            rows: vec![Vec::new(); vocab_size],
        }
    }

    pub fn from_pairs(vocab_size: usize, pairs: &[(TokenId, Vec<TokenId>)]) -> Result<Self> {
        let mut t = SubstitutionTable::new(vocab_size);
        for (tok, repls) in pairs {
            t.add(*tok, repls)?;
        }
        Ok(t)
    }

    pub fn add(&mut self, token: TokenId, replacements: &[TokenId]) -> Result<()> {
        if token >= self.rows.len() {
            return Err(Error::shape("SubstitutionTable::add", "token id out of range"));
        }
        for &r in replacements {
            if r >= self.rows.len() {
                return Err(Error::shape(
                    "SubstitutionTable::add",
                    "replacement id out of range",
                ));
            }
            if r == token {
                return Err(Error::shape(
                    "SubstitutionTable::add",
                    format!("token {token} maps to itself"),
                ));
            }
            self.rows[token].push(r);
        }
        self.rows[token].sort_unstable();
        self.rows[token].dedup();
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn replacements(&self, token: TokenId) -> &[TokenId] {
        self.rows.get(token).map_or(&[], |v| v.as_slice())
    }

    pub fn is_perturbable(&self, token: TokenId) -> bool {
        !self.replacements(token).is_empty()
    }

    /// Total replacement pairs in the table.
    pub fn pair_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// One single-token substitution. The embedding row is looked up when
/// vertices are built so that trainable embeddings never serve stale rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElementaryPerturbation {
    pub position: usize,
    pub replacement: TokenId,
}

/// Every elementary perturbation of one sentence plus the budget delta.
/// `elems` is position-major and, within a position, ordered by replacement
/// id; enumeration and vertex order both follow it.
#[derive(Clone, Debug)]
pub struct PerturbationSet {
    pub tokens: Vec<TokenId>,
    pub elems: Vec<ElementaryPerturbation>,
    pub budget: usize,
}

/// Lists every (position, replacement) pair the table allows for `tokens`.
pub fn elementary_perturbations(
    tokens: &[TokenId],
    table: &SubstitutionTable,
    budget: usize,
) -> PerturbationSet {
    let mut elems = Vec::new();
    for (position, &tok) in tokens.iter().enumerate() {
        for &replacement in table.replacements(tok) {
            elems.push(ElementaryPerturbation {
                position,
                replacement,
            });
        }
    }
    PerturbationSet {
        tokens: tokens.to_vec(),
        elems,
        budget,
    }
}

impl PerturbationSet {
    pub fn elem_count(&self) -> usize {
        self.elems.len()
    }

    /// Distinct positions with at least one replacement, ascending, with
    /// the replacement ids available at each.
    pub fn positions_with_options(&self) -> Vec<(usize, Vec<TokenId>)> {
        let mut out: Vec<(usize, Vec<TokenId>)> = Vec::new();
        for e in &self.elems {
            match out.last_mut() {
                Some((p, opts)) if *p == e.position => opts.push(e.replacement),
                _ => out.push((e.position, vec![e.replacement])),
            }
        }
        out
    }
}

/// Vertices of the dilated simplex covering all sequences within the
/// budget: vertex 0 is the unperturbed embedding; vertex m >= 1 replaces one
/// row with orig + delta * (repl - orig).
#[derive(Clone, Debug)]
pub struct SimplexVertices<F> {
    pub base: Tensor<F>,
    /// (position, dilated row) per vertex m = index + 1, in `elems` order.
    pub deltas: Vec<(usize, Vec<F>)>,
}

impl<F: Scalar> SimplexVertices<F> {
    /// Degenerate simplex for budget 0: the base point only.
    pub fn point(base: Tensor<F>) -> Self {
        SimplexVertices {
            base,
            deltas: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.deltas.len() + 1
    }

    /// Full (L, d) matrix of vertex m. Vertex 0 is the base.
    pub fn materialize(&self, m: usize) -> Tensor<F> {
        let mut out = self.base.clone();
        if m > 0 {
            let (pos, row) = &self.deltas[m - 1];
            out.row_mut(*pos).copy_from_slice(row);
        }
        out
    }
}

/// Builds the dilated vertex set for a perturbation set. Embedding rows are
/// read at call time.
pub fn build_simplex<F: Scalar>(
    pset: &PerturbationSet,
    embedding: &Embedding<F>,
) -> Result<SimplexVertices<F>> {
    if pset.budget < 1 {
        return Err(Error::InvalidDelta(format!(
            "build_simplex needs budget >= 1, got {}",
            pset.budget
        )));
    }
    let base = embedding.embed(&pset.tokens)?;
    let d = F::from_f64(pset.budget as f64);
    let mut deltas = Vec::with_capacity(pset.elems.len());
    for e in &pset.elems {
        let orig = base.row(e.position);
        let repl = embedding.row(e.replacement);
        // Budget 1 takes the replacement row verbatim: vertex m must equal
        // p(m) exactly, not up to rounding.
        let row = if pset.budget == 1 {
            repl.to_vec()
        } else {
            orig.iter()
                .zip(repl)
                .map(|(&o, &r)| o + d * (r - o))
                .collect()
        };
        deltas.push((e.position, row));
    }
    Ok(SimplexVertices { base, deltas })
}

/// Exact size of the concrete perturbation space, excluding the original:
/// sum over k in 1..=budget of the k-th elementary symmetric polynomial of
/// the per-position option counts.
pub fn count_space(pset: &PerturbationSet) -> Result<u64> {
    let opts: Vec<u64> = pset
        .positions_with_options()
        .iter()
        .map(|(_, o)| o.len() as u64)
        .collect();
    let overflow = || Error::CountOverflow {
        budget: pset.budget,
    };
    // e[k] accumulates the k-th elementary symmetric sum.
    let mut e = vec![0u64; pset.budget + 1];
    e[0] = 1;
    for &m in &opts {
        for k in (1..=pset.budget).rev() {
            let add = e[k - 1].checked_mul(m).ok_or_else(overflow)?;
            e[k] = e[k].checked_add(add).ok_or_else(overflow)?;
        }
    }
    let mut total = 0u64;
    for &ek in e.iter().skip(1) {
        total = total.checked_add(ek).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// Iterator over every concrete sequence within the budget. Order: the
/// original first, then k = 1..=budget substitutions; position k-tuples in
/// lexicographic order; within a tuple, replacement ids advance
/// odometer-style with the last position fastest.
pub struct SpaceIter<'a> {
    base: &'a [TokenId],
    positions: Vec<(usize, Vec<TokenId>)>,
    budget: usize,
    /// None until the original has been yielded.
    k: Option<usize>,
    comb: Vec<usize>,
    odo: Vec<usize>,
    done: bool,
}

pub fn enumerate_space(pset: &PerturbationSet) -> SpaceIter<'_> {
    SpaceIter {
        base: &pset.tokens,
        positions: pset.positions_with_options(),
        budget: pset.budget,
        k: None,
        comb: Vec::new(),
        odo: Vec::new(),
        done: false,
    }
}

impl<'a> SpaceIter<'a> {
    fn emit(&self) -> Vec<TokenId> {
        let mut out = self.base.to_vec();
        for (slot, &pi) in self.comb.iter().enumerate() {
            let (pos, opts) = &self.positions[pi];
            out[*pos] = opts[self.odo[slot]];
        }
        out
    }

    /// Advances to the next assignment, combination, or k. Returns false
    /// when the space is exhausted.
    fn advance(&mut self) -> bool {
        let p = self.positions.len();
        // Odometer over replacement choices, last slot fastest.
        for slot in (0..self.comb.len()).rev() {
            let opts_len = self.positions[self.comb[slot]].1.len();
            if self.odo[slot] + 1 < opts_len {
                self.odo[slot] += 1;
                for s in slot + 1..self.comb.len() {
                    self.odo[s] = 0;
                }
                return true;
            }
        }
        // Next k-combination of position indices, lexicographic.
        let k = self.comb.len();
        let mut i = k;
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            if self.comb[i] + 1 <= p - (k - i) {
                self.comb[i] += 1;
                for j in i + 1..k {
                    self.comb[j] = self.comb[j - 1] + 1;
                }
                self.odo = vec![0; k];
                return true;
            }
        }
        // Next k.
        let next_k = k + 1;
        if next_k > self.budget.min(p) {
            return false;
        }
        self.comb = (0..next_k).collect();
        self.odo = vec![0; next_k];
        self.k = Some(next_k);
        true
    }
}

impl<'a> Iterator for SpaceIter<'a> {
    type Item = Vec<TokenId>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.k {
            None => {
                self.k = Some(0);
                Some(self.base.to_vec())
            }
            Some(_) => {
                if self.advance() {
                    Some(self.emit())
                } else {
                    self.done = true;
                    None
                }
            }
        }
    }
}

/// A sampled element of the perturbation space. `edits` counts substituted
/// positions; 0 means the original came back (no perturbable position or
/// budget 0).
#[derive(Clone, Debug)]
pub struct SampledSequence {
    pub tokens: Vec<TokenId>,
    pub edits: usize,
}

/// Uniform sample: k uniform in 1..=min(budget, perturbable positions),
/// then k distinct positions without replacement, then one replacement per
/// chosen position.
pub fn sample_perturbation<R: Rng>(pset: &PerturbationSet, rng: &mut R) -> SampledSequence {
    let positions = pset.positions_with_options();
    let cap = pset.budget.min(positions.len());
    if cap == 0 {
        return SampledSequence {
            tokens: pset.tokens.clone(),
            edits: 0,
        };
    }
    let k = rng.gen_range(1..=cap);
    let chosen = sample_indices(rng, positions.len(), k);
    let mut tokens = pset.tokens.clone();
    for pi in chosen.iter() {
        let (pos, opts) = &positions[pi];
        tokens[*pos] = opts[rng.gen_range(0..opts.len())];
    }
    SampledSequence { tokens, edits: k }
}
