//! Root-to-leaf paths of a forest as readable rules.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::forest::ForestModel;
use super::tree::Node;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: String,
    pub feature_index: usize,
    pub op: Op,
    pub threshold: f64,
}

impl Predicate {
    pub fn holds(&self, x: &[f64]) -> bool {
        match self.op {
            Op::Le => x[self.feature_index] <= self.threshold,
            Op::Gt => x[self.feature_index] > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub tree: usize,
    pub predicates: Vec<Predicate>,
    pub value: f64,
    /// Training rows (of the tree's sample) that reach the leaf.
    pub coverage: usize,
}

impl Rule {
    pub fn matches(&self, x: &[f64]) -> bool {
        self.predicates.iter().all(|p| p.holds(x))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tree {}: if ", self.tree)?;
        if self.predicates.is_empty() {
            write!(f, "true")?;
        }
        for (i, p) in self.predicates.iter().enumerate() {
            if i > 0 {
                write!(f, " and ")?;
            }
            let op = match p.op {
                Op::Le => "<=",
                Op::Gt => ">",
            };
            write!(f, "{} {op} {}", p.feature, p.threshold)?;
        }
        write!(f, " then {} (covers {})", self.value, self.coverage)
    }
}

/// One rule per leaf of every tree, in tree then preorder.
pub fn extract_rules(model: &ForestModel) -> Vec<Rule> {
    let mut rules = Vec::new();
    for (t, tree) in model.trees.iter().enumerate() {
        let mut stack = vec![(0usize, Vec::<Predicate>::new())];
        while let Some((i, path)) = stack.pop() {
            match &tree.nodes[i] {
                Node::Leaf { value, n_samples } => rules.push(Rule {
                    tree: t,
                    predicates: path,
                    value: *value,
                    coverage: *n_samples,
                }),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let pred = |op| Predicate {
                        feature: model.feature_names[*feature].clone(),
                        feature_index: *feature,
                        op,
                        threshold: *threshold,
                    };
                    let mut r = path.clone();
                    r.push(pred(Op::Gt));
                    stack.push((*right, r));
                    let mut l = path;
                    l.push(pred(Op::Le));
                    stack.push((*left, l));
                }
            }
        }
    }
    rules
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::forest::{train_forest, ForestParams};
    use crate::predictor::tree::TreeParams;
    use crate::predictor::Target;

    #[test]
    fn single_split_gives_two_rules() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| if i < 5 { 10.0 } else { 20.0 }).collect();
        let p = ForestParams {
            n_trees: 1,
            bootstrap: false,
            tree: TreeParams {
                max_depth: 1,
                ..Default::default()
            },
            seed: 0,
        };
        let m = train_forest(&x, &y, &["x"], Target::Throughput, &p, "").unwrap();
        let rules = extract_rules(&m);
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].to_string(), "tree 0: if x <= 4.5 then 10 (covers 5)");
        assert_eq!(rules[1].to_string(), "tree 0: if x > 4.5 then 20 (covers 5)");
        for xi in &x {
            assert_eq!(rules.iter().filter(|r| r.matches(xi)).count(), 1);
        }
    }
}
