//! First-fit-decreasing packing of variable-length documents into token
//! budgets, with a block-diagonal attention specification.

use std::ops::Range;

use ndarray::Array2;

use crate::error::{contract_err, input_err, Result};
use crate::layout::{PositionCoords, SegmentSpan, UnifiedSequence};

/// One training or inference document: a unified sequence plus its
/// timestep and (for training) the velocity target of its target segment.
#[derive(Debug, Clone)]
pub struct Document {
    pub id: usize,
    pub seq: UnifiedSequence,
    pub t: f64,
    /// `target rows x c_vision`; required for loss computation.
    pub velocity: Option<Array2<f32>>,
}

impl Document {
    pub fn new(id: usize, seq: UnifiedSequence, t: f64) -> Self {
        Self {
            id,
            seq,
            t,
            velocity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocSpan {
    pub start: usize,
    pub end: usize,
    pub doc_id: usize,
}

/// Row `i` may attend to rows `intervals[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub intervals: Vec<Range<usize>>,
}

impl AttentionSpec {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.intervals[i].contains(&j)
    }

    pub fn allowed_pairs(&self) -> usize {
        self.intervals.iter().map(|r| r.len()).sum()
    }

    /// Maximal runs of rows sharing an interval; each run must equal its
    /// interval for attention to be block-diagonal.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut out: Vec<Range<usize>> = Vec::new();
        for (i, r) in self.intervals.iter().enumerate() {
            match out.last_mut() {
                Some(last) if self.intervals[last.start] == *r => last.end = i + 1,
                _ => out.push(i..i + 1),
            }
        }
        out
    }
}

/// Documents concatenated into one token budget.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub docs: Vec<Document>,
    pub doc_spans: Vec<DocSpan>,
    pub attention: AttentionSpec,
    pub budget: usize,
}

impl PackedBatch {
    /// Concatenate documents in the given order.
    pub fn from_docs(docs: Vec<Document>, budget: usize) -> Result<Self> {
        let mut doc_spans = Vec::with_capacity(docs.len());
        let mut start = 0;
        for d in &docs {
            doc_spans.push(DocSpan {
                start,
                end: start + d.len(),
                doc_id: d.id,
            });
            start += d.len();
        }
        if start > budget {
            return Err(input_err!("{start} tokens exceed the budget of {budget}"));
        }
        let mut batch = Self {
            docs,
            doc_spans,
            attention: AttentionSpec { intervals: vec![] },
            budget,
        };
        batch.attention = build_mask(&batch)?;
        Ok(batch)
    }

    pub fn single(doc: Document) -> Self {
        let budget = doc.len();
        Self::from_docs(vec![doc], budget).expect("a lone document fits its own length")
    }

    pub fn rows(&self) -> usize {
        self.doc_spans.last().map_or(0, |s| s.end)
    }

    pub fn coords(&self) -> PositionCoords {
        let mut out = PositionCoords::default();
        for d in &self.docs {
            out.h.extend_from_slice(&d.seq.coords.h);
            out.w.extend_from_slice(&d.seq.coords.w);
            out.s.extend_from_slice(&d.seq.coords.s);
            out.tau.extend_from_slice(&d.seq.coords.tau);
        }
        out
    }

    /// Document index of each row.
    pub fn row_docs(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.rows());
        for (d, span) in self.doc_spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(d, span.end - span.start));
        }
        out
    }

    /// Target content rows of document `d` in batch row numbering.
    pub fn target_span(&self, d: usize) -> Option<SegmentSpan> {
        let mut span = self.docs[d].seq.target_span()?;
        span.start += self.doc_spans[d].start;
        span.end += self.doc_spans[d].start;
        Some(span)
    }

    /// Check that the attention spec is exactly block-diagonal over the
    /// document spans.
    pub fn validate_attention(&self) -> Result<()> {
        if self.attention.intervals.len() != self.rows() {
            return Err(contract_err!(
                "attention spec covers {} rows, batch has {}",
                self.attention.intervals.len(),
                self.rows()
            ));
        }
        for span in &self.doc_spans {
            for i in span.start..span.end {
                if self.attention.intervals[i] != (span.start..span.end) {
                    return Err(contract_err!(
                        "row {i} attends to {:?}, its document spans {}..{}",
                        self.attention.intervals[i],
                        span.start,
                        span.end
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Row `i` may attend to row `j` iff both lie in the same document span.
pub fn build_mask(batch: &PackedBatch) -> Result<AttentionSpec> {
    let mut intervals = Vec::with_capacity(batch.rows());
    let mut cursor = 0;
    for span in &batch.doc_spans {
        if span.start != cursor || span.end < span.start {
            return Err(contract_err!(
                "document span {}..{} overlaps or leaves a gap after row {cursor}",
                span.start,
                span.end
            ));
        }
        intervals.extend(std::iter::repeat_n(span.start..span.end, span.end - span.start));
        cursor = span.end;
    }
    Ok(AttentionSpec { intervals })
}

/// Bin assignment by first-fit-decreasing; returns item indices per bin.
///
/// Items are ordered by length, longest first, ties broken by input order,
/// and each goes into the first open bin with room.
pub fn ffd_bins(lengths: &[usize], budget: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > budget) {
        return Err(input_err!("sequence {i} has {len} tokens, over the budget of {budget}"));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    for i in order {
        let len = lengths[i];
        match free.iter().position(|&f| f >= len) {
            Some(b) => {
                bins[b].push(i);
                free[b] -= len;
            }
            None => {
                bins.push(vec![i]);
                free.push(budget - len);
            }
        }
    }
    Ok(bins)
}

/// Pack documents into batches of at most `budget` tokens.
pub fn pack(docs: Vec<Document>, budget: usize) -> Result<Vec<PackedBatch>> {
    let lengths: Vec<usize> = docs.iter().map(Document::len).collect();
    let bins = ffd_bins(&lengths, budget).map_err(|e| match e {
        crate::Error::Input(msg) => {
            let id = lengths.iter().position(|&l| l > budget).map(|i| docs[i].id);
            input_err!("{msg} (document id {})", id.unwrap_or_default())
        }
        other => other,
    })?;
    let mut slots: Vec<Option<Document>> = docs.into_iter().map(Some).collect();
    bins.into_iter()
        .map(|bin| {
            let members = bin.into_iter().map(|i| slots[i].take().expect("each doc packed once")).collect();
            PackedBatch::from_docs(members, budget)
        })
        .collect()
}

/// Per-document weight in the batch loss: every document counts equally,
/// regardless of how many target tokens it has.
pub fn doc_loss_weights(batch: &PackedBatch) -> Vec<f64> {
    let n = batch.docs.len();
    vec![1.0 / n as f64; n]
}

/// Fractional lower bound on bin count.
pub fn bin_lower_bound(lengths: &[usize], budget: usize) -> usize {
    lengths.iter().sum::<usize>().div_ceil(budget)
}
