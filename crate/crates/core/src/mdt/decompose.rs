use std::collections::BTreeSet;

use super::{MdtError, MdtNode, ModuleKind};
use crate::relations::{verify_org, ActivityId, Org, Relation};

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
enum Rel {
    Before,
    After,
    Conc,
    Conf,
}

struct Matrix {
    ids: Vec<ActivityId>,
    rel: Vec<Vec<Rel>>,
}

impl Matrix {
    fn from_org(org: &Org) -> Matrix {
        let ids: Vec<ActivityId> = org.nodes().iter().cloned().collect();
        let n = ids.len();
        let mut rel = vec![vec![Rel::Conf; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                rel[i][j] = match org.relation(&ids[i], &ids[j]) {
                    Some(Relation::Before) => Rel::Before,
                    Some(Relation::After) => Rel::After,
                    Some(Relation::Concurrent) => Rel::Conc,
                    Some(Relation::Conflict) | None => Rel::Conf,
                };
            }
        }
        Matrix { ids, rel }
    }

    /// Connected components of `set` under `adjacent`, each sorted, ordered by least member.
    fn components(&self, set: &[usize], adjacent: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
        let mut assigned = vec![false; set.len()];
        let mut comps = Vec::new();
        for start in 0..set.len() {
            if assigned[start] {
                continue;
            }
            assigned[start] = true;
            let mut comp = vec![set[start]];
            let mut frontier = vec![start];
            while let Some(i) = frontier.pop() {
                for j in 0..set.len() {
                    if !assigned[j] && adjacent(set[i], set[j]) {
                        assigned[j] = true;
                        comp.push(set[j]);
                        frontier.push(j);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Finest split of `set` into blocks B1 < B2 < ... with every cross pair ordered.
    fn ordinal_blocks(&self, set: &[usize]) -> Vec<Vec<usize>> {
        // Kahn order; acyclic precedence is guaranteed by verify_org
        let mut order = Vec::with_capacity(set.len());
        let mut remaining: Vec<usize> = set.to_vec();
        while !remaining.is_empty() {
            let pos = remaining
                .iter()
                .position(|&v| remaining.iter().all(|&u| self.rel[u][v] != Rel::Before))
                .unwrap_or(0);
            order.push(remaining.remove(pos));
        }
        let mut blocks = Vec::new();
        let mut current = Vec::new();
        for (p, &v) in order.iter().enumerate() {
            current.push(v);
            let cut = p + 1 < order.len()
                && order[..=p]
                    .iter()
                    .all(|&x| order[p + 1..].iter().all(|&y| self.rel[x][y] == Rel::Before));
            if cut {
                current.sort_unstable();
                blocks.push(std::mem::take(&mut current));
            }
        }
        current.sort_unstable();
        blocks.push(current);
        blocks
    }

    /// Smallest module of the sub-structure on `set` containing `seed`.
    fn module_closure(&self, set: &[usize], seed: &[usize]) -> Vec<usize> {
        let mut inside = vec![false; self.rel.len()];
        let mut members: Vec<usize> = seed.to_vec();
        for &m in seed {
            inside[m] = true;
        }
        loop {
            let mut grew = false;
            for &z in set {
                if inside[z] {
                    continue;
                }
                let first = self.rel[z][members[0]];
                if members.iter().any(|&m| self.rel[z][m] != first) {
                    inside[z] = true;
                    members.push(z);
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        members.sort_unstable();
        members
    }

    /// Maximal proper modules of a prime set.
    fn prime_children(&self, set: &[usize]) -> Vec<Vec<usize>> {
        let mut assigned = vec![false; self.rel.len()];
        let mut children = Vec::new();
        for &v in set {
            if assigned[v] {
                continue;
            }
            let mut child: BTreeSet<usize> = BTreeSet::from([v]);
            for &w in set {
                if w == v || child.contains(&w) {
                    continue;
                }
                let m = self.module_closure(set, &[v, w]);
                if m.len() < set.len() {
                    child.extend(m);
                }
            }
            for &c in &child {
                assigned[c] = true;
            }
            children.push(child.into_iter().collect());
        }
        children
    }

    fn decompose(&self, set: Vec<usize>) -> MdtNode {
        if set.len() == 1 {
            return MdtNode::leaf(self.ids[set[0]].clone());
        }
        let xor = self.components(&set, |i, j| self.rel[i][j] != Rel::Conf);
        if xor.len() > 1 {
            return self.composite(ModuleKind::CompleteXor, xor);
        }
        let and = self.components(&set, |i, j| self.rel[i][j] != Rel::Conc);
        if and.len() > 1 {
            return self.composite(ModuleKind::CompleteAnd, and);
        }
        let blocks = self.ordinal_blocks(&set);
        if blocks.len() > 1 {
            return self.composite(ModuleKind::Linear, blocks);
        }
        let mut children = self.prime_children(&set);
        children.sort();
        self.composite(ModuleKind::Primitive, children)
    }

    fn composite(&self, kind: ModuleKind, parts: Vec<Vec<usize>>) -> MdtNode {
        let children = parts.into_iter().map(|p| self.decompose(p)).collect();
        MdtNode::composite(kind, children)
    }
}

/// Modular decomposition tree of a well-formed ordering relations graph.
///
/// Internal nodes are the strong modules. Children of a linear node follow
/// the precedence order; all other children are sorted by least descendant.
/// Runs in polynomial time without the linear-time machinery, which is plenty
/// for a few hundred activities.
pub fn decompose(org: &Org) -> Result<MdtNode, MdtError> {
    if org.nodes().is_empty() {
        return Err(MdtError::EmptyOrg);
    }
    let diagnostics = verify_org(org);
    if !diagnostics.is_empty() {
        return Err(MdtError::InvalidOrg(diagnostics));
    }
    let matrix = Matrix::from_org(org);
    let all: Vec<usize> = (0..matrix.ids.len()).collect();
    Ok(matrix.decompose(all))
}
