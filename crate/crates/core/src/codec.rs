//! Token sequences for the masked model: a context region of real past
//! steps followed by a plan region whose state slots all repeat the current
//! state and whose action slots start out as `PAD`.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::gridworld::{Action, Layout};
use crate::oracle::{Demo, StateVec};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("context of {got} steps exceeds capacity {max}")]
    ContextOverflow { got: usize, max: usize },
    #[error("plan horizon must be at least 1")]
    EmptyHorizon,
    #[error("mask position {0} is outside the plan region")]
    MaskOutsidePlan(usize),
    #[error("dataset has no demo with actions")]
    EmptyDataset,
}

/// Action vocabulary with the two specials. Codes are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Token {
    Left = 0,
    Right = 1,
    Forward = 2,
    Open = 3,
    Pad = 4,
    Mask = 5,
}

impl Token {
    pub const VOCAB: usize = 6;
    /// Number of real action tokens.
    pub const ACTIONS: usize = 4;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Token> {
        Some(match code {
            0 => Token::Left,
            1 => Token::Right,
            2 => Token::Forward,
            3 => Token::Open,
            4 => Token::Pad,
            5 => Token::Mask,
            _ => return None,
        })
    }

    /// `None` for `Pickup`/`Drop`, which have no token.
    pub fn from_action(a: Action) -> Option<Token> {
        a.vocab_index().and_then(|i| Token::from_code(i as u8))
    }

    pub fn action(self) -> Option<Action> {
        Action::PLANNING.get(self as usize).copied()
    }

    pub fn is_action(self) -> bool {
        (self as usize) < Token::ACTIONS
    }
}

impl From<Action> for Token {
    fn from(a: Action) -> Token {
        Token::from_action(a).expect("action outside the planning vocabulary")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub states: Vec<StateVec>,
    pub actions: Vec<Token>,
    pub ctx_len: usize,
    pub horizon: usize,
    /// What the model perceives of the environment.
    pub layout: Arc<Layout>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn plan_range(&self) -> Range<usize> {
        self.ctx_len..self.ctx_len + self.horizon
    }

    /// State the plan starts from.
    pub fn current_state(&self) -> StateVec {
        self.states[self.ctx_len]
    }

    /// The plan-region actions, or `None` while a `PAD`/`MASK` remains.
    pub fn plan_actions(&self) -> Option<Vec<Action>> {
        self.actions[self.plan_range()].iter().map(|t| t.action()).collect()
    }

    /// Copy with the plan region replaced by `plan`.
    pub fn with_plan(&self, plan: &[Action]) -> TokenSeq {
        assert_eq!(plan.len(), self.horizon, "plan length must equal the horizon");
        let mut out = self.clone();
        for (slot, &a) in out.actions[self.ctx_len..].iter_mut().zip(plan) {
            *slot = Token::from(a);
        }
        out
    }

    /// Copy whose plan region holds raw tokens.
    pub fn with_plan_tokens(&self, plan: &[Token]) -> TokenSeq {
        assert_eq!(plan.len(), self.horizon);
        let mut out = self.clone();
        out.actions[self.ctx_len..].copy_from_slice(plan);
        out
    }

    /// Copy perceived through a different layout.
    pub fn with_layout(&self, layout: Arc<Layout>) -> TokenSeq {
        TokenSeq {
            layout,
            ..self.clone()
        }
    }

    /// Checks the template layout: every plan state slot repeats the current
    /// state and the context holds no `PAD`/`MASK`.
    pub fn is_well_formed(&self) -> bool {
        let n = self.ctx_len + self.horizon;
        self.states.len() == n
            && self.actions.len() == n
            && self.horizon >= 1
            && self.states[self.plan_range()].iter().all(|s| *s == self.current_state())
            && self.actions[..self.ctx_len].iter().all(|t| t.is_action())
    }
}

/// Positions to mask, all inside the plan region. Kept sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    indices: Vec<usize>,
}

impl MaskPattern {
    pub fn new(mut indices: Vec<usize>, seq: &TokenSeq) -> Result<MaskPattern, CodecError> {
        indices.sort_unstable();
        indices.dedup();
        let plan = seq.plan_range();
        if let Some(&bad) = indices.iter().find(|i| !plan.contains(i)) {
            return Err(CodecError::MaskOutsidePlan(bad));
        }
        Ok(MaskPattern { indices })
    }

    pub fn empty() -> MaskPattern {
        MaskPattern { indices: Vec::new() }
    }

    /// Every plan position.
    pub fn all(seq: &TokenSeq) -> MaskPattern {
        MaskPattern {
            indices: seq.plan_range().collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub seq: TokenSeq,
    /// `(position, original token)` for every masked slot.
    pub targets: Vec<(usize, Token)>,
}

/// Build the planning template: `ctx` real steps, then `horizon` slots that
/// repeat `current` with `PAD` actions.
pub fn make_plan_template(
    ctx: &[(StateVec, Action)],
    current: StateVec,
    horizon: usize,
    max_ctx: usize,
    layout: Arc<Layout>,
) -> Result<TokenSeq, CodecError> {
    if ctx.len() > max_ctx {
        return Err(CodecError::ContextOverflow {
            got: ctx.len(),
            max: max_ctx,
        });
    }
    if horizon == 0 {
        return Err(CodecError::EmptyHorizon);
    }
    let mut states: Vec<StateVec> = ctx.iter().map(|(s, _)| *s).collect();
    let mut actions: Vec<Token> = ctx.iter().map(|(_, a)| Token::from(*a)).collect();
    states.extend(std::iter::repeat_n(current, horizon));
    actions.extend(std::iter::repeat_n(Token::Pad, horizon));
    Ok(TokenSeq {
        states,
        actions,
        ctx_len: ctx.len(),
        horizon,
        layout,
    })
}

/// Replace the action slots in `pattern` by `MASK`, returning the originals.
pub fn apply_mask(seq: &TokenSeq, pattern: &MaskPattern) -> Masked {
    let mut out = seq.clone();
    let targets = pattern
        .indices()
        .iter()
        .map(|&i| {
            let original = out.actions[i];
            out.actions[i] = Token::Mask;
            (i, original)
        })
        .collect();
    Masked { seq: out, targets }
}

/// Context and plan sizes used to cut training windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub ctx_len: usize,
    pub horizon: usize,
}

/// The window of `demo` whose plan starts at step `start`, laid out exactly
/// like a planning template (up to `ctx_len` real past steps, plan states
/// repeating `states[start]`, actions past the demo end as `PAD`).
pub fn demo_window(demo: &Demo, start: usize, window: WindowSpec) -> TokenSeq {
    let k = window.ctx_len.min(start);
    let ctx: Vec<(StateVec, Action)> = (start - k..start).map(|i| (demo.states[i], demo.actions[i])).collect();
    let mut seq = make_plan_template(
        &ctx,
        demo.states[start],
        window.horizon,
        window.ctx_len,
        Arc::new(demo.layout.clone()),
    )
    .expect("window fits by construction");
    for (slot, a) in seq.actions[k..].iter_mut().zip(&demo.actions[start..]) {
        *slot = Token::from(*a);
    }
    seq
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    /// Window with exactly one action masked.
    pub seq: TokenSeq,
    pub position: usize,
    pub target: Action,
}

/// Sample `batch_size` training examples: a uniform demo, a uniform window
/// start within it, and one uniformly chosen real plan action masked.
pub fn training_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    window: WindowSpec,
    rng: &mut R,
) -> Result<Vec<TrainExample>, CodecError> {
    let usable: Vec<&Demo> = dataset.demos.iter().filter(|d| !d.is_empty()).collect();
    if usable.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    Ok((0..batch_size)
        .map(|_| {
            let demo = usable[rng.gen_range(0..usable.len())];
            let start = rng.gen_range(0..demo.len());
            sample_example(demo, start, window, rng)
        })
        .collect())
}

fn sample_example<R: Rng + ?Sized>(demo: &Demo, start: usize, window: WindowSpec, rng: &mut R) -> TrainExample {
    let seq = demo_window(demo, start, window);
    let real: Vec<usize> = seq.plan_range().filter(|&i| seq.actions[i].is_action()).collect();
    let position = real[rng.gen_range(0..real.len())];
    let pattern = MaskPattern::new(vec![position], &seq).expect("position is in the plan region");
    let masked = apply_mask(&seq, &pattern);
    let target = masked.targets[0].1.action().expect("real action");
    TrainExample {
        seq: masked.seq,
        position,
        target,
    }
}

/// Encode a whole demo: all steps as context, a single `PAD` plan slot at
/// the final state.
pub fn encode_demo(demo: &Demo) -> TokenSeq {
    let ctx: Vec<(StateVec, Action)> = demo.states.iter().copied().zip(demo.actions.iter().copied()).collect();
    make_plan_template(
        &ctx,
        *demo.states.last().expect("demo has a first state"),
        1,
        ctx.len(),
        Arc::new(demo.layout.clone()),
    )
    .expect("capacity equals context length")
}

/// Inverse of [`encode_demo`].
pub fn decode_demo(seq: &TokenSeq) -> (Vec<StateVec>, Vec<Action>) {
    let actions = seq.actions[..seq.ctx_len]
        .iter()
        .map(|t| t.action().expect("context holds real actions"))
        .collect();
    (seq.states[..=seq.ctx_len].to_vec(), actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Dir, EnvSpec, Pose};
    use crate::oracle::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> Arc<Layout> {
        Arc::new(Layout {
            width: 7,
            height: 7,
            blocked: vec![],
            closed_doors: vec![],
        })
    }

    fn s(x: u8) -> StateVec {
        StateVec::new(Pose::new(x, 1, Dir::E), (5, 5))
    }

    #[test]
    fn pure_plan_template() {
        let t = make_plan_template(&[], s(1), 5, 0, layout()).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.states.iter().all(|&x| x == s(1)));
        assert!(t.actions.iter().all(|&a| a == Token::Pad));
        assert!(t.is_well_formed());
    }

    #[test]
    fn short_horizon_with_context() {
        let ctx = [(s(1), Action::Forward), (s(2), Action::Forward)];
        let t = make_plan_template(&ctx, s(3), 1, 20, layout()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.actions[2], Token::Pad);
        assert_eq!(t.plan_range(), 2..3);
        assert!(t.is_well_formed());
    }

    #[test]
    fn long_context_layout() {
        let ctx: Vec<_> = (0..20).map(|i| (s(i % 5 + 1), Action::Left)).collect();
        let t = make_plan_template(&ctx, s(3), 5, 20, layout()).unwrap();
        assert_eq!(t.len(), 25);
        assert!(t.actions[..20].iter().all(|a| a.is_action()));
        assert!(t.actions[20..].iter().all(|&a| a == Token::Pad));
    }

    #[test]
    fn context_overflow() {
        let ctx = [(s(1), Action::Forward); 3];
        assert_eq!(
            make_plan_template(&ctx, s(3), 2, 2, layout()),
            Err(CodecError::ContextOverflow { got: 3, max: 2 })
        );
        assert_eq!(make_plan_template(&[], s(3), 0, 2, layout()), Err(CodecError::EmptyHorizon));
    }

    #[test]
    fn masking() {
        let t = make_plan_template(&[(s(1), Action::Right)], s(2), 4, 4, layout()).unwrap();
        let id = apply_mask(&t, &MaskPattern::empty());
        assert_eq!(id.seq, t);
        assert!(id.targets.is_empty());
        let m = apply_mask(&t, &MaskPattern::new(vec![1], &t).unwrap());
        assert_eq!(m.seq.actions, vec![Token::Right, Token::Mask, Token::Pad, Token::Pad, Token::Pad]);
        assert_eq!(m.seq.states, t.states);
        assert_eq!(m.targets, vec![(1, Token::Pad)]);
        assert_eq!(MaskPattern::new(vec![0], &t), Err(CodecError::MaskOutsidePlan(0)));
        assert_eq!(MaskPattern::new(vec![5], &t), Err(CodecError::MaskOutsidePlan(5)));
    }

    #[test]
    fn token_codes_are_fixed() {
        assert_eq!(Token::from(Action::Left).code(), 0);
        assert_eq!(Token::from(Action::Right).code(), 1);
        assert_eq!(Token::from(Action::Forward).code(), 2);
        assert_eq!(Token::from(Action::Open).code(), 3);
        assert_eq!(Token::Pad.code(), 4);
        assert_eq!(Token::Mask.code(), 5);
        assert_eq!(Token::from_action(Action::Pickup), None);
    }

    #[test]
    fn batch_has_one_mask_per_example() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 20, 0.0, 1).unwrap();
        let w = WindowSpec { ctx_len: 0, horizon: 5 };
        let batch = training_batch(&ds, 64, w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.len(), 64);
        for ex in &batch {
            let masks = ex.seq.actions.iter().filter(|&&t| t == Token::Mask).count();
            assert_eq!(masks, 1);
            assert_eq!(ex.seq.actions[ex.position], Token::Mask);
            assert!(ex.seq.plan_range().contains(&ex.position));
            assert!(ex.seq.states.iter().all(|&st| st == ex.seq.current_state()));
        }
    }

    #[test]
    fn short_demo_window_is_padded() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 30, 0.0, 4).unwrap();
        let demo = ds.demos.iter().find(|d| d.len() >= 3).unwrap();
        let start = demo.len() - 1;
        let w = demo_window(demo, start, WindowSpec { ctx_len: 2, horizon: 5 });
        assert_eq!(w.ctx_len, 2);
        assert_eq!(w.actions[2], Token::from(demo.actions[start]));
        assert!(w.actions[3..].iter().all(|&t| t == Token::Pad));
        assert!(w.is_well_formed());
    }

    #[test]
    fn empty_dataset_has_no_batches() {
        let spec = EnvSpec {
            width: 3,
            height: 3,
            obstacles: 0,
            agent: Some(Pose::new(1, 1, Dir::N)),
            goal: Some((1, 1)),
            ..EnvSpec::default()
        };
        let ds = generate_dataset(&spec, 2, 0.0, 0).unwrap();
        let w = WindowSpec { ctx_len: 0, horizon: 5 };
        assert_eq!(
            training_batch(&ds, 4, w, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(CodecError::EmptyDataset)
        );
    }
}
