use std::ops::Range;
use std::rc::Rc;

use crate::autodiff::Visibility;

use super::ModelError;

/// One prompt followed by several candidates in a single token sequence.
///
/// Segment 0 is the prompt; segment `i` (1-based) is candidate `i`. A token
/// sees the prompt and, causally, the earlier tokens of its own segment, and
/// nothing of any other candidate. Every candidate's positions restart at the
/// prompt length, so all candidates share the same positional encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub target_mask: Vec<bool>,
    prompt_len: usize,
    segments: Vec<Range<usize>>,
    n_positives: usize,
}

impl PackedBatch {
    pub fn new(prompt: &[u32], candidates: &[Vec<u32>]) -> Result<Self, ModelError> {
        Self::with_positives(prompt, candidates, candidates.len())
    }

    /// Packs candidates where the first `n_positives` are positives.
    pub fn with_positives(
        prompt: &[u32],
        candidates: &[Vec<u32>],
        n_positives: usize,
    ) -> Result<Self, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptySegment(0));
        }
        let total = prompt.len() + candidates.iter().map(Vec::len).sum::<usize>();
        let mut tokens = Vec::with_capacity(total);
        let mut segment_ids = Vec::with_capacity(total);
        let mut position_ids = Vec::with_capacity(total);
        let mut target_mask = Vec::with_capacity(total);
        for (p, &t) in prompt.iter().enumerate() {
            tokens.push(t);
            segment_ids.push(0);
            position_ids.push(p as u32);
            target_mask.push(false);
        }
        let mut segments = Vec::with_capacity(candidates.len());
        for (i, cand) in candidates.iter().enumerate() {
            if cand.is_empty() {
                return Err(ModelError::EmptySegment(i + 1));
            }
            let start = tokens.len();
            for (p, &t) in cand.iter().enumerate() {
                tokens.push(t);
                segment_ids.push((i + 1) as u32);
                position_ids.push((prompt.len() + p) as u32);
                target_mask.push(true);
            }
            segments.push(start..tokens.len());
        }
        Ok(Self {
            tokens,
            segment_ids,
            position_ids,
            target_mask,
            prompt_len: prompt.len(),
            segments,
            n_positives: n_positives.min(candidates.len()),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn n_candidates(&self) -> usize {
        self.segments.len()
    }

    pub fn n_positives(&self) -> usize {
        self.n_positives
    }

    /// Flat token range of candidate `i` (0-based).
    pub fn segment(&self, i: usize) -> Result<Range<usize>, ModelError> {
        self.segments.get(i).cloned().ok_or(ModelError::NoSuchSegment(i))
    }

    pub fn candidate(&self, i: usize) -> Result<&[u32], ModelError> {
        Ok(&self.tokens[self.segment(i)?])
    }

    /// Whether query position `i` may attend to key position `j`.
    pub fn visible(&self, i: usize, j: usize) -> bool {
        j <= i && (self.segment_ids[j] == 0 || self.segment_ids[j] == self.segment_ids[i])
    }

    /// Dense boolean matrix form of [`PackedBatch::visible`].
    pub fn visibility_matrix(&self) -> Vec<Vec<bool>> {
        (0..self.len())
            .map(|i| (0..self.len()).map(|j| self.visible(i, j)).collect())
            .collect()
    }

    pub(crate) fn visibility_lists(&self) -> Visibility {
        let lists = (0..self.len())
            .map(|i| {
                let own = self.segment_ids[i];
                if own == 0 {
                    (0..=i).collect()
                } else {
                    let start = self.segments[own as usize - 1].start;
                    (0..self.prompt_len).chain(start..=i).collect()
                }
            })
            .collect();
        Rc::new(lists)
    }

    /// Flat position whose output distribution predicts token `pos`.
    ///
    /// The first token of every candidate is predicted from the last prompt
    /// token; later tokens from their predecessor in the same segment.
    pub fn predictor_of(&self, pos: usize) -> Option<usize> {
        if !self.target_mask[pos] {
            return None;
        }
        let seg = self.segment_ids[pos] as usize - 1;
        if pos == self.segments[seg].start {
            Some(self.prompt_len - 1)
        } else {
            Some(pos - 1)
        }
    }

    /// Distinct predictor positions, ascending.
    pub(crate) fn predictor_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.len()).filter_map(|p| self.predictor_of(p)).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Prompt and candidate token lists.
    pub fn unpack(&self) -> (Vec<u32>, Vec<Vec<u32>>) {
        let cands = self.segments.iter().map(|r| self.tokens[r.clone()].to_vec()).collect();
        (self.prompt().to_vec(), cands)
    }

    /// Same candidates in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, ModelError> {
        let (prompt, cands) = self.unpack();
        let reordered: Vec<Vec<u32>> = order
            .iter()
            .map(|&i| cands.get(i).cloned().ok_or(ModelError::NoSuchSegment(i)))
            .collect::<Result<_, _>>()?;
        Self::with_positives(&prompt, &reordered, self.n_positives)
    }
}
