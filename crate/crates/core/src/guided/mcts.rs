use serde::{Deserialize, Serialize};

use crate::decoders::{process_logits, top_tokens, DecodeResult, StepTrace, TraceEntry};
use crate::error::{Error, Result};
use crate::models::{next_token_logprobs, LanguageModel};
use crate::types::{CallCounters, DecodeParams, ScoredHypothesis, TokenId};
use crate::value::{value_estimate, ValueModel};

/// How a newly expanded node is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafEval {
    /// Value model on the leaf prefix.
    #[default]
    Value,
    /// Greedy completion from the leaf, then the value model on the result.
    RolloutGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsParams {
    pub decode: DecodeParams,
    /// Simulations per emitted token.
    pub simulations: usize,
    pub c_puct: f64,
    /// Children created per expansion, taken by likelihood.
    pub top_m: usize,
    pub leaf_eval: LeafEval,
}

impl Default for MctsParams {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            simulations: 50,
            c_puct: 1.25,
            top_m: 20,
            leaf_eval: LeafEval::Value,
        }
    }
}

impl MctsParams {
    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        if self.simulations == 0 {
            return Err(Error::InvalidParameter("simulations must be at least 1".into()));
        }
        if self.top_m == 0 {
            return Err(Error::InvalidParameter("top_m must be at least 1".into()));
        }
        if !(self.c_puct > 0.0 && self.c_puct.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "c_puct must be positive, got {}",
                self.c_puct
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    hyp: ScoredHypothesis,
    token: TokenId,
    prior: f64,
    visits: u64,
    value_sum: f64,
    /// `None` until expanded.
    children: Option<Vec<usize>>,
}

impl Node {
    fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

/// Arena-allocated search tree. Nodes of abandoned subtrees stay in the
/// arena; decodes are short enough that this never matters.
pub(crate) struct Tree {
    nodes: Vec<Node>,
    root: usize,
}

struct Search<'a, M: ?Sized, V: ?Sized> {
    model: &'a M,
    vm: &'a V,
    context: &'a [TokenId],
    params: &'a MctsParams,
    eos: TokenId,
    counters: CallCounters,
}

impl<M: LanguageModel + ?Sized, V: ValueModel + ?Sized> Search<'_, M, V> {
    /// Creates children for `idx` and returns the processed next-token
    /// log-probabilities used to do so.
    fn expand(&mut self, tree: &mut Tree, idx: usize) -> Result<Vec<f64>> {
        let d = &self.params.decode;
        let hyp = tree.nodes[idx].hyp.clone();
        let lp = next_token_logprobs(self.model, self.context, &hyp.seq, &mut self.counters)?;
        let processed = process_logits(self.context, &hyp.seq, &lp, &d.heuristics, self.eos)?;
        let toks = top_tokens(&processed, self.params.top_m);
        let max = processed[toks[0]];
        let z: f64 = toks.iter().map(|&t| (processed[t] - max).exp()).sum();
        let mut children = Vec::with_capacity(toks.len());
        for t in toks {
            children.push(tree.nodes.len());
            tree.nodes.push(Node {
                hyp: hyp.extend(t, lp[t], self.eos, d.max_len),
                token: t,
                prior: (processed[t] - max).exp() / z,
                visits: 0,
                value_sum: 0.0,
                children: None,
            });
        }
        tree.nodes[idx].children = Some(children);
        Ok(processed)
    }

    fn rollout(&mut self, start: &ScoredHypothesis, first: &[f64]) -> Result<Vec<TokenId>> {
        let d = &self.params.decode;
        let mut hyp = start.clone();
        let mut processed = first.to_vec();
        loop {
            let tok = top_tokens(&processed, 1)[0];
            hyp = hyp.extend(tok, 0.0, self.eos, d.max_len);
            if hyp.finished {
                return Ok(hyp.seq.0);
            }
            let lp = next_token_logprobs(self.model, self.context, &hyp.seq, &mut self.counters)?;
            processed = process_logits(self.context, &hyp.seq, &lp, &d.heuristics, self.eos)?;
        }
    }

    fn select_child(&self, tree: &Tree, idx: usize) -> usize {
        let parent = &tree.nodes[idx];
        let sqrt_n = (parent.visits as f64).sqrt();
        let children = parent.children.as_ref().expect("expanded");
        let mut best = children[0];
        let mut best_score = f64::NEG_INFINITY;
        for &c in children {
            let n = &tree.nodes[c];
            let u = n.q() + self.params.c_puct * n.prior * sqrt_n / (1.0 + n.visits as f64);
            if u > best_score {
                best = c;
                best_score = u;
            }
        }
        best
    }

    /// One select / expand / evaluate / backup pass from the root.
    fn simulate(&mut self, tree: &mut Tree) -> Result<()> {
        let mut path = vec![tree.root];
        let mut idx = tree.root;
        while tree.nodes[idx].children.is_some() && !tree.nodes[idx].hyp.finished {
            idx = self.select_child(tree, idx);
            path.push(idx);
        }
        let leaf = &tree.nodes[idx].hyp;
        let value = if leaf.finished {
            value_estimate(self.vm, self.context, &leaf.seq.clone(), &mut self.counters)
        } else {
            let leaf = leaf.clone();
            let processed = self.expand(tree, idx)?;
            match self.params.leaf_eval {
                LeafEval::Value => value_estimate(self.vm, self.context, &leaf.seq, &mut self.counters),
                LeafEval::RolloutGreedy => {
                    let done = self.rollout(&leaf, &processed)?;
                    value_estimate(self.vm, self.context, &done, &mut self.counters)
                }
            }
        };
        for &i in &path {
            tree.nodes[i].visits += 1;
            tree.nodes[i].value_sum += value;
        }
        Ok(())
    }

    /// Most visited root child; ties go to higher Q, then lower token id.
    fn commit(&self, tree: &Tree) -> Option<usize> {
        let children = tree.nodes[tree.root].children.as_ref()?;
        children.iter().copied().max_by(|&a, &b| {
            let (x, y) = (&tree.nodes[a], &tree.nodes[b]);
            x.visits
                .cmp(&y.visits)
                .then(x.q().total_cmp(&y.q()))
                .then(y.token.cmp(&x.token))
        })
    }
}

impl Tree {
    fn new() -> Self {
        Self {
            nodes: vec![Node {
                hyp: ScoredHypothesis::root(),
                token: 0,
                prior: 1.0,
                visits: 0,
                value_sum: 0.0,
                children: None,
            }],
            root: 0,
        }
    }

    /// Within the live subtree, every expanded node has been visited once
    /// more than all its children together, and every Q lies in `[0, 1]`.
    #[cfg(test)]
    pub(crate) fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            if !(0.0..=1.0).contains(&n.q()) {
                return Err(format!("node {i}: Q = {}", n.q()));
            }
            if let Some(ch) = &n.children {
                let sum: u64 = ch.iter().map(|&c| self.nodes[c].visits).sum();
                if n.visits != sum + 1 {
                    return Err(format!("node {i}: {} visits, children sum to {sum}", n.visits));
                }
                stack.extend(ch);
            }
        }
        Ok(())
    }
}

fn run<M, V>(
    model: &M,
    vm: &V,
    context: &[TokenId],
    params: &MctsParams,
    mut after_simulation: impl FnMut(&Tree),
) -> Result<DecodeResult>
where
    M: LanguageModel + ?Sized,
    V: ValueModel + ?Sized,
{
    params.validate()?;
    let mut search = Search {
        model,
        vm,
        context,
        params,
        eos: model.vocab().eos(),
        counters: CallCounters::default(),
    };
    let mut tree = Tree::new();
    let mut traces: Option<Vec<StepTrace>> = params.decode.trace.then(Vec::new);
    while !tree.nodes[tree.root].hyp.finished {
        for _ in 0..params.simulations {
            search.simulate(&mut tree)?;
            after_simulation(&tree);
        }
        let step = tree.nodes[tree.root].hyp.len();
        let next = search.commit(&tree).ok_or(Error::EmptySupportAfterProcessing { step })?;
        tree.root = next;
        if let Some(t) = traces.as_mut() {
            let n = &tree.nodes[next];
            t.push(StepTrace {
                step,
                selected: vec![TraceEntry {
                    seq: n.hyp.seq.clone(),
                    logprob: n.hyp.logprob,
                    score: n.q(),
                }],
                expansions: Vec::new(),
            });
        }
    }
    let best = tree.nodes[tree.root].hyp.clone();
    Ok(DecodeResult {
        candidates: vec![best.clone()],
        best,
        step_traces: traces,
        counters: search.counters,
        seed_used: params.decode.seed,
    })
}

/// Emits one token per round of `S` PUCT simulations, committing to the
/// most visited child and keeping its subtree for the next round.
pub fn mcts_decode<M, V>(model: &M, vm: &V, context: &[TokenId], params: &MctsParams) -> Result<DecodeResult>
where
    M: LanguageModel + ?Sized,
    V: ValueModel + ?Sized,
{
    run(model, vm, context, params, |_| {})
}
