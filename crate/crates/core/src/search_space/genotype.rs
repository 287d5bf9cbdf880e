use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::alpha::edge_softmax;
use super::{Alpha, CellTopology, OpKind, OperationSet, SpaceKind};
use crate::error::{Error, Result};

/// Retained `(operation, source state)` pairs of one node.
pub type NodeEdges = Vec<(OpKind, usize)>;

/// Discrete architecture. Sources index cell states: inputs first, then
/// computed nodes in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub space: SpaceKind,
    pub normal: Vec<NodeEdges>,
    pub reduce: Vec<NodeEdges>,
}

impl Genotype {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialises")
    }

    /// Every node of both cell types uses `op` on its first edges.
    pub fn uniform(space: SpaceKind, nodes: usize, op: OpKind) -> Self {
        let topo = CellTopology::for_space(space, nodes);
        let cell = |_| -> Vec<NodeEdges> {
            (0..nodes)
                .map(|j| match space {
                    SpaceKind::Darts => vec![(op, 0), (op, 1)],
                    SpaceKind::Nb201 => (0..topo.inputs + j).map(|s| (op, s)).collect(),
                })
                .collect()
        };
        Self {
            space,
            normal: cell(0),
            reduce: if space == SpaceKind::Darts { cell(1) } else { Vec::new() },
        }
    }

    /// Uniformly random valid genotype: Darts space picks two distinct
    /// sources per node and a non-none operation for each; Nb201 picks any
    /// operation per edge.
    pub fn random(space: SpaceKind, nodes: usize, ops: &OperationSet, rng: &mut impl Rng) -> Self {
        let topo = CellTopology::for_space(space, nodes);
        let choices: Vec<OpKind> = match space {
            SpaceKind::Darts => ops.ops().iter().copied().filter(|&o| o != OpKind::None).collect(),
            SpaceKind::Nb201 => ops.ops().to_vec(),
        };
        let mut cell = || -> Vec<NodeEdges> {
            (0..nodes)
                .map(|j| {
                    let n_src = topo.inputs + j;
                    let mut srcs: Vec<usize> = match space {
                        SpaceKind::Darts => sample(rng, n_src, 2).into_vec(),
                        SpaceKind::Nb201 => (0..n_src).collect(),
                    };
                    srcs.sort_unstable();
                    srcs.into_iter().map(|s| (*choices.choose(rng).expect("non-empty op set"), s)).collect()
                })
                .collect()
        };
        let normal = cell();
        let reduce = if space == SpaceKind::Darts { cell() } else { Vec::new() };
        Self { space, normal, reduce }
    }

    /// Checks structural rules against the space's topology and operation set.
    pub fn validate(&self, nodes: usize, ops: &OperationSet) -> Result<()> {
        let topo = CellTopology::for_space(self.space, nodes);
        let cells: &[(&str, &Vec<NodeEdges>)] = match self.space {
            SpaceKind::Darts => &[("normal", &self.normal), ("reduce", &self.reduce)],
            SpaceKind::Nb201 => &[("normal", &self.normal)],
        };
        let bad = |msg: String| Error::config("genotype", msg);
        if self.space == SpaceKind::Nb201 && !self.reduce.is_empty() {
            return Err(bad("single-cell space has no reduce cell".into()));
        }
        for &(name, cell) in cells {
            if cell.len() != nodes {
                return Err(bad(format!("{name} cell has {} nodes, expected {nodes}", cell.len())));
            }
            for (j, edges) in cell.iter().enumerate() {
                let n_src = topo.inputs + j;
                for (i, &(op, src)) in edges.iter().enumerate() {
                    if src >= n_src {
                        return Err(bad(format!("{name} node {j}: source {src} is not an earlier state")));
                    }
                    if edges[..i].iter().any(|&(_, s)| s == src) {
                        return Err(bad(format!("{name} node {j}: duplicate source {src}")));
                    }
                    if ops.index_of(op).is_none() {
                        return Err(bad(format!("{name} node {j}: {op} is not a candidate")));
                    }
                }
                match self.space {
                    SpaceKind::Darts => {
                        if edges.len() != 2 {
                            return Err(bad(format!("{name} node {j} keeps {} edges, expected 2", edges.len())));
                        }
                        if edges.iter().any(|&(op, _)| op == OpKind::None) {
                            return Err(bad(format!("{name} node {j} selects none")));
                        }
                    }
                    SpaceKind::Nb201 => {
                        if edges.len() != n_src {
                            return Err(bad(format!("{name} node {j} lists {} edges, expected {n_src}", edges.len())));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// All chosen operations of the normal cell (and the reduce cell if `both`).
    pub fn choices(&self, both: bool) -> impl Iterator<Item = OpKind> + '_ {
        let reduce: &[NodeEdges] = if both { &self.reduce } else { &[] };
        self.normal
            .iter()
            .chain(reduce)
            .flat_map(|n| n.iter().map(|&(op, _)| op))
    }
}

fn argmax_first(xs: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    xs.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
}

fn discretize_cell(alpha: &crate::tensor::Tensor, topo: &CellTopology, ops: &OperationSet, space: SpaceKind) -> Vec<NodeEdges> {
    let probs = edge_softmax(alpha);
    let none = ops.index_of(OpKind::None);
    (0..topo.nodes)
        .map(|j| {
            let n_src = topo.inputs + j;
            match space {
                SpaceKind::Darts => {
                    // Strongest non-none operation on each incoming edge.
                    let mut cands: Vec<(usize, usize, f64)> = (0..n_src)
                        .filter_map(|s| {
                            let row = &probs[topo.edge_index(j, s)];
                            argmax_first(row.iter().copied().enumerate().filter(|&(k, _)| Some(k) != none))
                                .map(|(k, w)| (s, k, w))
                        })
                        .collect();
                    // Stable sort keeps lower sources first among equal strengths.
                    cands.sort_by(|a, b| b.2.total_cmp(&a.2));
                    let mut kept: Vec<(OpKind, usize)> =
                        cands.into_iter().take(2).map(|(s, k, _)| (ops.ops()[k], s)).collect();
                    kept.sort_by_key(|&(_, s)| s);
                    kept
                }
                SpaceKind::Nb201 => (0..n_src)
                    .map(|s| {
                        let row = &probs[topo.edge_index(j, s)];
                        let (k, _) = argmax_first(row.iter().copied().enumerate()).expect("non-empty row");
                        (ops.ops()[k], s)
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Discrete architecture from α. Darts space: best non-none op per edge,
/// then the two strongest edges per node; ties go to the lower op index and
/// then the lower source. Nb201 space: argmax per edge, `none` allowed.
pub fn discretize(alpha: &Alpha, space: SpaceKind, nodes: usize, ops: &OperationSet) -> Genotype {
    let topo = CellTopology::for_space(space, nodes);
    Genotype {
        space,
        normal: discretize_cell(&alpha.normal, &topo, ops, space),
        reduce: alpha
            .reduce
            .as_ref()
            .map(|r| discretize_cell(r, &topo, ops, space))
            .unwrap_or_default(),
    }
}

/// Share of `skip_connect` among the chosen operations (normal cell unless `both`).
pub fn skip_fraction(g: &Genotype, both: bool) -> f64 {
    let (mut skip, mut total) = (0usize, 0usize);
    for op in g.choices(both) {
        total += 1;
        skip += (op == OpKind::SkipConnect) as usize;
    }
    if total == 0 {
        0.0
    } else {
        skip as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn darts() -> (SpaceKind, OperationSet) {
        (SpaceKind::Darts, OperationSet::for_space(SpaceKind::Darts))
    }

    #[test]
    fn equal_alpha_picks_first_ops_and_edges() {
        let (space, ops) = darts();
        let g = discretize(&Alpha::zeros(14, 8, true), space, 4, &ops);
        for cell in [&g.normal, &g.reduce] {
            for node in cell {
                assert_eq!(node, &vec![(OpKind::SkipConnect, 0), (OpKind::SkipConnect, 1)]);
            }
        }
        g.validate(4, &ops).unwrap();
    }

    #[test]
    fn nb201_dominant_none_gives_all_none() {
        let ops = OperationSet::for_space(SpaceKind::Nb201);
        let normal = Tensor::from_fn(vec![6, 5], |i| if i % 5 == 0 { 5.0 } else { 0.0 });
        let a = Alpha { normal, reduce: None };
        let g = discretize(&a, SpaceKind::Nb201, 3, &ops);
        assert!(g.choices(true).all(|op| op == OpKind::None));
        assert_eq!(g.normal[2].len(), 3);
        g.validate(3, &ops).unwrap();
    }

    #[test]
    fn skip_fraction_counts() {
        let all_skip = Genotype::uniform(SpaceKind::Darts, 4, OpKind::SkipConnect);
        assert_eq!(skip_fraction(&all_skip, false), 1.0);
        let none = Genotype::uniform(SpaceKind::Darts, 4, OpKind::SepConv3x3);
        assert_eq!(skip_fraction(&none, true), 0.0);
        let mut half = none.clone();
        half.normal[0] = vec![(OpKind::SkipConnect, 0), (OpKind::SkipConnect, 1)];
        half.normal[2][1].0 = OpKind::SkipConnect;
        half.normal[3][0].0 = OpKind::SkipConnect;
        assert_eq!(skip_fraction(&half, false), 0.5);
        assert_eq!(skip_fraction(&half, true), 0.25);
    }

    #[test]
    fn json_round_trip_and_field_order() {
        let g = Genotype::uniform(SpaceKind::Darts, 4, OpKind::DilConv3x3);
        let s = g.to_json();
        assert!(s.find("\"space\"").unwrap() < s.find("\"normal\"").unwrap());
        assert!(s.find("\"normal\"").unwrap() < s.find("\"reduce\"").unwrap());
        assert!(s.contains("[\n        \"dil_conv_3x3\",\n        0\n      ]"));
        assert_eq!(Genotype::from_json(&s).unwrap(), g);
        assert!(Genotype::from_json("{\"space\": \"darts\"").is_err());
    }

    #[test]
    fn random_genotypes_are_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for space in [SpaceKind::Darts, SpaceKind::Nb201] {
            let ops = OperationSet::for_space(space);
            let nodes = if space == SpaceKind::Darts { 4 } else { 3 };
            let draws: Vec<Genotype> = (0..20).map(|_| Genotype::random(space, nodes, &ops, &mut rng)).collect();
            for g in &draws {
                g.validate(nodes, &ops).unwrap();
            }
            assert!(draws.iter().any(|g| g != &draws[0]));
        }
    }

    #[test]
    fn validate_rejects_broken_genotypes() {
        let (_, ops) = darts();
        let mut g = Genotype::uniform(SpaceKind::Darts, 4, OpKind::SkipConnect);
        g.normal[1][0] = (OpKind::None, 0);
        assert!(g.validate(4, &ops).is_err());
        let mut g = Genotype::uniform(SpaceKind::Darts, 4, OpKind::SkipConnect);
        g.normal[0][1] = (OpKind::SkipConnect, 2);
        assert!(g.validate(4, &ops).is_err());
        let mut g = Genotype::uniform(SpaceKind::Darts, 4, OpKind::SkipConnect);
        g.reduce.pop();
        assert!(g.validate(4, &ops).is_err());
    }

    /// Brute force: every edge's best non-none op and every node's top two
    /// edges by that weight, when all maxima are strict.
    fn brute_force(alpha: &Tensor, ops: &OperationSet) -> Vec<NodeEdges> {
        let topo = CellTopology::for_space(SpaceKind::Darts, 4);
        let k = alpha.shape()[1];
        let mut out = Vec::new();
        for j in 0..4 {
            let mut best: Vec<(f64, usize, usize)> = Vec::new();
            for s in 0..j + 2 {
                let row = &alpha.data()[topo.edge_index(j, s) * k..][..k];
                let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
                let (mut bk, mut bw) = (1, f64::MIN);
                for (kk, &v) in row.iter().enumerate().skip(1) {
                    let w = (v as f64).exp() / z;
                    if w > bw {
                        bw = w;
                        bk = kk;
                    }
                }
                best.push((bw, s, bk));
            }
            let mut pairs = Vec::new();
            for a in 0..best.len() {
                for b in a + 1..best.len() {
                    pairs.push((best[a].0 + best[b].0, a, b));
                }
            }
            let (_, a, b) = pairs.into_iter().fold((f64::MIN, 0, 0), |m, p| if p.0 > m.0 { p } else { m });
            out.push(vec![(ops.ops()[best[a].2], best[a].1), (ops.ops()[best[b].2], best[b].1)]);
        }
        out
    }

    proptest! {
        #[test]
        fn discretize_matches_brute_force(vals in prop::collection::vec(-3.0f32..3.0, 14 * 8)) {
            let (space, ops) = darts();
            let normal = Tensor::new(vec![14, 8], vals).unwrap();
            let g = discretize(&Alpha { normal: normal.clone(), reduce: None }, space, 4, &ops);
            prop_assert_eq!(g.normal, brute_force(&normal, &ops));
        }

        #[test]
        fn discretize_is_shift_invariant(vals in prop::collection::vec(-3.0f32..3.0, 14 * 8), shifts in prop::collection::vec(-5.0f32..5.0, 14)) {
            let (space, ops) = darts();
            let a = Alpha { normal: Tensor::new(vec![14, 8], vals.clone()).unwrap(), reduce: None };
            let shifted = Tensor::from_fn(vec![14, 8], |i| vals[i] + shifts[i / 8]);
            let b = Alpha { normal: shifted, reduce: None };
            prop_assert_eq!(discretize(&a, space, 4, &ops), discretize(&b, space, 4, &ops));
        }
    }
}
