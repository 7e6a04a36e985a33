//! Unified interleaved sequence: segments, boundary tokens, 4D coordinates
//! and the per-modality input projectors.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::codec::VisionTokens;
use crate::error::{contract_err, dim_err, input_err, Result};
use crate::real::Real;
use crate::rope::AXES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Video,
}

impl Modality {
    pub fn is_vision(self) -> bool {
        !matches!(self, Modality::Text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Context,
    Target,
}

/// How the sequential coordinate advances over vision segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqMode {
    /// +1 per image/video frame.
    #[default]
    PerFrame,
    /// +1 per whole vision segment.
    PerSegment,
}

impl std::str::FromStr for SeqMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_frame" => Ok(SeqMode::PerFrame),
            "per_segment" => Ok(SeqMode::PerSegment),
            other => Err(input_err!("unknown seq mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Text(Vec<usize>),
    Vision(VisionTokens),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub modality: Modality,
    pub role: Role,
    pub payload: Payload,
}

impl Segment {
    pub fn text(ids: Vec<usize>) -> Self {
        Self {
            modality: Modality::Text,
            role: Role::Context,
            payload: Payload::Text(ids),
        }
    }

    /// Image when the token grid has one frame, video otherwise.
    pub fn vision(tokens: VisionTokens, role: Role) -> Self {
        let modality = if tokens.grid.0 == 1 {
            Modality::Image
        } else {
            Modality::Video
        };
        Self {
            modality,
            role,
            payload: Payload::Vision(tokens),
        }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::Text(ids) => ids.len(),
            Payload::Vision(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> Option<(usize, usize, usize)> {
        match &self.payload {
            Payload::Text(_) => None,
            Payload::Vision(v) => Some(v.grid),
        }
    }

    pub fn vision_tokens(&self) -> Option<&VisionTokens> {
        match &self.payload {
            Payload::Vision(v) => Some(v),
            Payload::Text(_) => None,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        match (&self.payload, self.modality) {
            (Payload::Text(ids), Modality::Text) => {
                if ids.is_empty() {
                    return Err(input_err!("text segment {index} is empty"));
                }
                if self.role == Role::Target {
                    return Err(contract_err!("text segment {index} cannot be the generation target"));
                }
            }
            (Payload::Vision(v), Modality::Image) if v.grid.0 != 1 => {
                return Err(contract_err!("image segment {index} has {} frames", v.grid.0));
            }
            (Payload::Vision(_), Modality::Image | Modality::Video) => {}
            _ => return Err(contract_err!("segment {index} payload does not match its modality")),
        }
        Ok(())
    }
}

/// Reorder so every vision segment follows all text, keeping relative order
/// within each group.
pub fn deinterleave(segments: Vec<Segment>) -> Vec<Segment> {
    let (text, vision): (Vec<_>, Vec<_>) = segments.into_iter().partition(|s| !s.modality.is_vision());
    text.into_iter().chain(vision).collect()
}

/// Drop every text segment.
pub fn without_text(segments: &[Segment]) -> Vec<Segment> {
    segments.iter().filter(|s| s.modality.is_vision()).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub seq_mode: SeqMode,
    /// Pixel distance between adjacent vision tokens `(rows, cols)`.
    pub pixel_stride: (usize, usize),
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            seq_mode: SeqMode::PerFrame,
            pixel_stride: (4, 4),
        }
    }
}

/// What a row of the unified sequence is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Text { segment: usize, pos: usize },
    Vision { segment: usize, row: usize },
    VisionStart { segment: usize },
    VisionEnd { segment: usize },
}

/// Per-token coordinates in `(h, w, s, tau)` order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositionCoords {
    pub h: Vec<u32>,
    pub w: Vec<u32>,
    pub s: Vec<u32>,
    pub tau: Vec<u32>,
}

impl PositionCoords {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    fn push(&mut self, h: usize, w: usize, s: usize, tau: usize) {
        self.h.push(h as u32);
        self.w.push(w as u32);
        self.s.push(s as u32);
        self.tau.push(tau as u32);
    }

    pub fn get(&self, i: usize) -> [f64; AXES] {
        [self.h[i] as f64, self.w[i] as f64, self.s[i] as f64, self.tau[i] as f64]
    }

    pub fn as_rows(&self) -> Vec<[f64; AXES]> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Segment content rows `[start, end)` in the unified sequence (boundary
/// tokens excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
    pub segment: usize,
    pub modality: Modality,
    pub role: Role,
}

/// Ordered segments plus the parameter-free layout derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSequence {
    pub segments: Vec<Segment>,
    pub rows: Vec<RowKind>,
    pub coords: PositionCoords,
    pub spans: Vec<SegmentSpan>,
    pub target_index: Option<usize>,
}

impl UnifiedSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn target_span(&self) -> Option<SegmentSpan> {
        let t = self.target_index?;
        self.spans.iter().copied().find(|s| s.segment == t)
    }

    /// Target payload rows, if any.
    pub fn target_tokens(&self) -> Option<&VisionTokens> {
        self.target_index.and_then(|t| self.segments[t].vision_tokens())
    }
}

/// Validate segments and build the unified layout.
pub fn assemble(segments: Vec<Segment>, cfg: &LayoutConfig) -> Result<UnifiedSequence> {
    if segments.is_empty() {
        return Err(input_err!("a sequence needs at least one segment"));
    }
    let mut target_index = None;
    for (i, seg) in segments.iter().enumerate() {
        seg.validate(i)?;
        if seg.role == Role::Target {
            if target_index.is_some() {
                return Err(contract_err!("more than one target segment"));
            }
            target_index = Some(i);
        }
    }
    let coords = assign_coords(&segments, cfg);
    let mut rows = Vec::with_capacity(coords.len());
    let mut spans = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        match &seg.payload {
            Payload::Text(ids) => {
                let start = rows.len();
                rows.extend((0..ids.len()).map(|pos| RowKind::Text { segment: i, pos }));
                spans.push(SegmentSpan {
                    start,
                    end: rows.len(),
                    segment: i,
                    modality: seg.modality,
                    role: seg.role,
                });
            }
            Payload::Vision(v) => {
                rows.push(RowKind::VisionStart { segment: i });
                let start = rows.len();
                rows.extend((0..v.len()).map(|row| RowKind::Vision { segment: i, row }));
                spans.push(SegmentSpan {
                    start,
                    end: rows.len(),
                    segment: i,
                    modality: seg.modality,
                    role: seg.role,
                });
                rows.push(RowKind::VisionEnd { segment: i });
            }
        }
    }
    debug_assert_eq!(rows.len(), coords.len());
    Ok(UnifiedSequence {
        segments,
        rows,
        coords,
        spans,
        target_index,
    })
}

/// Coordinates for every row, boundary tokens included.
///
/// Vision tokens take pixel-unit `h`/`w`, the frame index as `tau`, and one
/// sequential step per frame (or per segment). Text and boundary tokens sit
/// at `h = w = tau = 0`; boundary tokens share `s` with the first/last frame
/// of their segment.
pub fn assign_coords(segments: &[Segment], cfg: &LayoutConfig) -> PositionCoords {
    let (sh, sw) = cfg.pixel_stride;
    let mut coords = PositionCoords::default();
    let mut cursor = 0usize;
    for seg in segments {
        match &seg.payload {
            Payload::Text(ids) => {
                for _ in ids {
                    coords.push(0, 0, cursor, 0);
                    cursor += 1;
                }
            }
            Payload::Vision(v) => {
                let (t, hp, wp) = v.grid;
                let frame_s = |f: usize| match cfg.seq_mode {
                    SeqMode::PerFrame => cursor + f,
                    SeqMode::PerSegment => cursor,
                };
                coords.push(0, 0, frame_s(0), 0);
                for f in 0..t {
                    for row in 0..hp {
                        for col in 0..wp {
                            coords.push(row * sh, col * sw, frame_s(f), f);
                        }
                    }
                }
                coords.push(0, 0, frame_s(t - 1), 0);
                cursor = frame_s(t - 1) + 1;
            }
        }
    }
    coords
}

/// Text lookup table, the two linear projectors and the boundary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Projectors<F: Real> {
    /// `vocab x c_text`
    pub text_embed: Array2<F>,
    /// `c_text x hidden`
    pub text_w: Array2<F>,
    pub text_b: Array1<F>,
    /// `c_vision x hidden`
    pub vision_w: Array2<F>,
    pub vision_b: Array1<F>,
    pub vision_start: Array1<F>,
    pub vision_end: Array1<F>,
}

/// Text tokens and their looked-up embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens<F: Real> {
    pub ids: Vec<usize>,
    pub embeddings: Array2<F>,
}

impl<F: Real> Projectors<F> {
    pub fn zeros(vocab: usize, c_text: usize, c_vision: usize, hidden: usize) -> Self {
        Self {
            text_embed: Array2::zeros((vocab, c_text)),
            text_w: Array2::zeros((c_text, hidden)),
            text_b: Array1::zeros(hidden),
            vision_w: Array2::zeros((c_vision, hidden)),
            vision_b: Array1::zeros(hidden),
            vision_start: Array1::zeros(hidden),
            vision_end: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.text_w.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.text_embed.nrows()
    }

    pub fn embed_text(&self, ids: &[usize]) -> Result<TextTokens<F>> {
        if ids.is_empty() {
            return Err(input_err!("text segment is empty"));
        }
        if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.vocab_size()) {
            return Err(input_err!(
                "token id {id} at position {pos} is outside the vocabulary of {}",
                self.vocab_size()
            ));
        }
        let embeddings = self.text_embed.select(Axis(0), ids);
        Ok(TextTokens {
            ids: ids.to_vec(),
            embeddings,
        })
    }

    /// Map one segment's payload to hidden width.
    pub fn project(&self, seg: &Segment) -> Result<Array2<F>> {
        match &seg.payload {
            Payload::Text(ids) => {
                let text = self.embed_text(ids)?;
                Ok(text.embeddings.dot(&self.text_w) + &self.text_b)
            }
            Payload::Vision(v) => {
                if v.width() != self.vision_w.nrows() {
                    return Err(dim_err!(
                        "vision token width {} does not match projector input {}",
                        v.width(),
                        self.vision_w.nrows()
                    ));
                }
                let x = v.tokens.mapv(|a| F::of(a as f64));
                Ok(x.dot(&self.vision_w) + &self.vision_b)
            }
        }
    }

    /// Hidden-width input matrix for a whole sequence, boundary tokens
    /// included.
    pub fn embed(&self, seq: &UnifiedSequence) -> Result<Array2<F>> {
        let mut out = Array2::<F>::zeros((seq.len(), self.hidden()));
        for (i, seg) in seq.segments.iter().enumerate() {
            let span = seq.spans.iter().find(|s| s.segment == i).expect("span per segment");
            let proj = self.project(seg)?;
            out.slice_mut(s![span.start..span.end, ..]).assign(&proj);
            if seg.modality.is_vision() {
                out.row_mut(span.start - 1).assign(&self.vision_start);
                out.row_mut(span.end).assign(&self.vision_end);
            }
        }
        Ok(out)
    }

    /// Accumulate parameter gradients given `d_out`, the gradient of the
    /// loss with respect to [`Projectors::embed`]'s output.
    pub fn backward(&self, seq: &UnifiedSequence, d_out: ndarray::ArrayView2<F>, grads: &mut Self) {
        for (i, seg) in seq.segments.iter().enumerate() {
            let span = seq.spans.iter().find(|s| s.segment == i).expect("span per segment");
            let d = d_out.slice(s![span.start..span.end, ..]);
            match &seg.payload {
                Payload::Text(ids) => {
                    let e = self.text_embed.select(Axis(0), ids);
                    grads.text_w += &e.t().dot(&d);
                    grads.text_b += &d.sum_axis(Axis(0));
                    let de = d.dot(&self.text_w.t());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = grads.text_embed.row_mut(id);
                        row += &de.row(r);
                    }
                }
                Payload::Vision(v) => {
                    let x = v.tokens.mapv(|a| F::of(a as f64));
                    grads.vision_w += &x.t().dot(&d);
                    grads.vision_b += &d.sum_axis(Axis(0));
                    add_row(&mut grads.vision_start, d_out.row(span.start - 1));
                    add_row(&mut grads.vision_end, d_out.row(span.end));
                }
            }
        }
    }
}

fn add_row<F: Real>(dst: &mut Array1<F>, src: ArrayView1<F>) {
    *dst += &src;
}
