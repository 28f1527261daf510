//! Parameter tree shared by stored weights (`Weights<Tensor>`) and their
//! handles on a tape (`Weights<Var>`).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

/// One GRU over a slice of the flattened bottleneck features. Gate columns
/// are ordered reset, update, candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru<T> {
    pub w_input: T,
    pub w_hidden: T,
    pub b_input: T,
    pub b_hidden: T,
}

/// One decoder branch. `skips[l]` and `deconvs[l]` belong to encoder depth
/// `l + 1`; `deconvs[0]` emits the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch<T> {
    pub skips: Vec<Conv<T>>,
    pub deconvs: Vec<Conv<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    pub encoder: Vec<Conv<T>>,
    pub gru: Vec<Gru<T>>,
    pub branches: Vec<Branch<T>>,
}

impl<T> Conv<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Weights<T> {
    /// Same tree with every leaf transformed, visiting leaves in
    /// [`Weights::iter`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            encoder: self.encoder.iter().map(|c| c.map(&mut f)).collect(),
            gru: self
                .gru
                .iter()
                .map(|g| Gru {
                    w_input: f(&g.w_input),
                    w_hidden: f(&g.w_hidden),
                    b_input: f(&g.b_input),
                    b_hidden: f(&g.b_hidden),
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    skips: b.skips.iter().map(|c| c.map(&mut f)).collect(),
                    deconvs: b.deconvs.iter().map(|c| c.map(&mut f)).collect(),
                })
                .collect(),
        }
    }

    /// Leaves in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (l, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{l}.weight"), &c.weight));
            out.push((format!("encoder.{l}.bias"), &c.bias));
        }
        for (j, g) in self.gru.iter().enumerate() {
            out.push((format!("gru.{j}.w_input"), &g.w_input));
            out.push((format!("gru.{j}.w_hidden"), &g.w_hidden));
            out.push((format!("gru.{j}.b_input"), &g.b_input));
            out.push((format!("gru.{j}.b_hidden"), &g.b_hidden));
        }
        for (b, br) in self.branches.iter().enumerate() {
            for (l, c) in br.skips.iter().enumerate() {
                out.push((format!("branch.{b}.skip.{l}.weight"), &c.weight));
                out.push((format!("branch.{b}.skip.{l}.bias"), &c.bias));
            }
            for (l, c) in br.deconvs.iter().enumerate() {
                out.push((format!("branch.{b}.deconv.{l}.weight"), &c.weight));
                out.push((format!("branch.{b}.deconv.{l}.bias"), &c.bias));
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.named().into_iter().map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for c in &mut self.encoder {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for g in &mut self.gru {
            out.push(&mut g.w_input);
            out.push(&mut g.w_hidden);
            out.push(&mut g.b_input);
            out.push(&mut g.b_hidden);
        }
        for br in &mut self.branches {
            for c in br.skips.iter_mut().chain(br.deconvs.iter_mut()) {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
        }
        out.into_iter()
    }

    /// Rebuilds a tree of the same structure from leaves in canonical order.
    pub fn zip_from<U>(&self, leaves: Vec<U>) -> Option<Weights<U>> {
        let mut it = leaves.into_iter();
        let mut missing = false;
        let tree = self.map(|_| ());
        let mut out = Vec::new();
        for _ in tree.iter() {
            match it.next() {
                Some(v) => out.push(v),
                None => missing = true,
            }
        }
        if missing || it.next().is_some() {
            return None;
        }
        let mut out = out.into_iter();
        Some(tree.map(|_| out.next().expect("counted above")))
    }
}
