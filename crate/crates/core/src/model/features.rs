//! Turns token sequences into embedding-table indices.
//!
//! Each slot sums embeddings of its state features, its action token and its
//! position. The state part also carries an egocentric view of the layout:
//! every blocked cell and closed door contributes the embedding of its offset
//! relative to the agent, rotated so "ahead" is the agent's heading. The goal
//! gets the same egocentric treatment. Slots that share a state and layout
//! share one state group so the (comparatively costly) view sum is built once.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::Query;
use crate::codec::TokenSeq;
use crate::gridworld::{Dir, Layout};
use crate::oracle::StateVec;

#[derive(Debug, Clone)]
pub(crate) struct StateGroup {
    pub x: usize,
    pub y: usize,
    pub dir: usize,
    pub gx: usize,
    pub gy: usize,
    pub goal: usize,
    pub view: Range<usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    pub group: usize,
    pub act: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Encoded {
    pub groups: Vec<StateGroup>,
    pub view_pool: Vec<u32>,
    pub slots: Vec<Slot>,
    /// Slot offsets of each sequence; `len = sequences + 1`.
    pub seq_offsets: Vec<usize>,
    /// Global slot index of every queried position, in query order.
    pub queries: Vec<usize>,
}

/// Side length of the egocentric offset square for a grid bound `grid`.
pub(crate) fn view_span(grid: usize) -> usize {
    2 * grid - 1
}

/// Egocentric index of `(cx, cy)` seen from `(x, y)` facing `dir`.
fn ego_index(grid: usize, x: u8, y: u8, dir: Dir, cx: u8, cy: u8) -> usize {
    let (dx, dy) = (cx as i32 - x as i32, cy as i32 - y as i32);
    let (fx, fy) = dir.delta();
    let (rx, ry) = dir.right().delta();
    let ahead = dx * fx + dy * fy;
    let lateral = dx * rx + dy * ry;
    let g = grid as i32 - 1;
    ((ahead + g) * (2 * g + 1) + lateral + g) as usize
}

pub(crate) fn encode(queries: &[Query<'_>], grid: usize, max_len: usize) -> Encoded {
    let mut enc = Encoded {
        seq_offsets: vec![0],
        ..Encoded::default()
    };
    let span2 = view_span(grid).pow(2);
    let mut memo: HashMap<(*const Layout, StateVec), usize> = HashMap::new();
    for q in queries {
        let seq: &TokenSeq = q.seq;
        assert!(
            seq.states.len() <= max_len,
            "sequence of {} slots exceeds model capacity {max_len}",
            seq.states.len()
        );
        assert!(
            (seq.layout.width as usize) <= grid && (seq.layout.height as usize) <= grid,
            "{}x{} layout exceeds model grid bound {grid}",
            seq.layout.width,
            seq.layout.height
        );
        let base = enc.slots.len();
        for (pos, (state, act)) in seq.states.iter().zip(&seq.actions).enumerate() {
            let key = (Arc::as_ptr(&seq.layout), *state);
            let group = *memo
                .entry(key)
                .or_insert_with(|| push_group(&mut enc, &seq.layout, *state, grid, span2));
            enc.slots.push(Slot {
                group,
                act: act.code() as usize,
                pos,
            });
        }
        enc.seq_offsets.push(enc.slots.len());
        enc.queries.extend(q.positions.iter().map(|&p| {
            assert!(p < seq.states.len(), "query position {p} out of range");
            base + p
        }));
    }
    enc
}

fn push_group(enc: &mut Encoded, layout: &Layout, s: StateVec, grid: usize, span2: usize) -> usize {
    let dir = Dir::from_code(s.dir).expect("state direction code in 0..4");
    let start = enc.view_pool.len();
    for &(cx, cy) in &layout.blocked {
        enc.view_pool.push(ego_index(grid, s.x, s.y, dir, cx, cy) as u32);
    }
    for &(cx, cy) in &layout.closed_doors {
        enc.view_pool.push((span2 + ego_index(grid, s.x, s.y, dir, cx, cy)) as u32);
    }
    enc.groups.push(StateGroup {
        x: s.x as usize,
        y: s.y as usize,
        dir: s.dir as usize,
        gx: s.gx as usize,
        gy: s.gy as usize,
        goal: ego_index(grid, s.x, s.y, dir, s.gx, s.gy),
        view: start..enc.view_pool.len(),
    });
    enc.groups.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ego_offsets_rotate_with_heading() {
        let g = 5;
        let center = (g - 1) * view_span(g) + (g - 1);
        assert_eq!(ego_index(g, 2, 2, Dir::N, 2, 2), center);
        // The cell north of the agent is "one ahead" when facing north,
        // "one behind" when facing south and "one to the left" facing east.
        let one_ahead = center + view_span(g);
        assert_eq!(ego_index(g, 2, 2, Dir::N, 2, 1), one_ahead);
        assert_eq!(ego_index(g, 2, 2, Dir::S, 2, 3), one_ahead);
        assert_eq!(ego_index(g, 2, 2, Dir::E, 3, 2), one_ahead);
        assert_eq!(ego_index(g, 2, 2, Dir::E, 2, 1), center - 1);
        assert_eq!(ego_index(g, 2, 2, Dir::W, 2, 1), center + 1);
        // Extremes stay in range.
        for dir in [Dir::N, Dir::E, Dir::S, Dir::W] {
            assert!(ego_index(g, 0, 0, dir, 4, 4) < view_span(g).pow(2));
            assert!(ego_index(g, 4, 4, dir, 0, 0) < view_span(g).pow(2));
        }
    }
}
