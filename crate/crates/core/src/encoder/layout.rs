use crate::data::{AttributedText, CLS, SEP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    X,
    Y,
}

/// Role of a position in the joint sequence. Attribute segments carry the
/// attribute's index within its side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Cls,
    Sep,
    XText,
    XAttr(usize),
    YText,
    YAttr(usize),
}

impl Segment {
    pub const COUNT: usize = 6;

    /// Row of the segment embedding table.
    pub fn embedding_index(self) -> usize {
        match self {
            Segment::Cls => 0,
            Segment::Sep => 1,
            Segment::XText => 2,
            Segment::XAttr(_) => 3,
            Segment::YText => 4,
            Segment::YAttr(_) => 5,
        }
    }
}

/// Where one attribute sits: its words occupy `start..end` and its `[SEP]`
/// is at `sep_position` (0-based, `[CLS]` at 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttrSpan {
    pub side: Side,
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub sep_position: usize,
}

/// `[CLS] [SEP] X [SEP] a1 … [SEP] a_nA [SEP] Y [SEP] b1 … [SEP] b_nB`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutPlan {
    pub token_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub attr_spans: Vec<AttrSpan>,
    pub x_sep: usize,
    pub y_sep: usize,
    pub n_a: usize,
    pub n_b: usize,
    /// Text tokens dropped to fit `max_len`.
    pub truncated: usize,
}

impl LayoutPlan {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn spans(&self, side: Side) -> impl Iterator<Item = &AttrSpan> {
        self.attr_spans.iter().filter(move |s| s.side == side)
    }

    /// For every position, the index into `attr_spans` of the attribute whose
    /// words it holds.
    pub fn attribute_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (k, s) in self.attr_spans.iter().enumerate() {
            out[s.start..s.end].iter_mut().for_each(|o| *o = Some(k));
        }
        out
    }
}

/// Lays out a pair. When the pair exceeds `max_len`, Y-text is shortened
/// first, then X-text, each down to one token; attributes are never cut.
pub fn build_layout(x: &AttributedText, y: &AttributedText, max_len: usize) -> Result<LayoutPlan> {
    if x.tokens.is_empty() || y.tokens.is_empty() {
        return Err(Error::Layout("both sides need at least one text token".into()));
    }
    if let Some(a) = x.attributes.iter().chain(&y.attributes).find(|a| a.tokens.is_empty()) {
        return Err(Error::Layout(format!("attribute `{}` has no tokens", a.attr_type)));
    }
    let (n_a, n_b) = (x.attributes.len(), y.attributes.len());
    let fixed = 1 + 2 + n_a + n_b + x.attribute_tokens() + y.attribute_tokens();
    let (mut m, mut n) = (x.tokens.len(), y.tokens.len());
    if fixed + 2 > max_len {
        return Err(Error::Layout(format!(
            "attributes and specials need {} positions, max_len is {max_len}",
            fixed + 2
        )));
    }
    let over = (fixed + m + n).saturating_sub(max_len);
    let cut_y = over.min(n - 1);
    n -= cut_y;
    m -= over - cut_y;

    let len = fixed + m + n;
    let mut token_ids = Vec::with_capacity(len);
    let mut segments = Vec::with_capacity(len);
    let mut attr_spans = Vec::with_capacity(n_a + n_b);
    token_ids.push(CLS);
    segments.push(Segment::Cls);
    let mut x_sep = 0;
    let mut y_sep = 0;
    for (side, text, keep) in [(Side::X, x, m), (Side::Y, y, n)] {
        let sep = token_ids.len();
        match side {
            Side::X => x_sep = sep,
            Side::Y => y_sep = sep,
        }
        token_ids.push(SEP);
        segments.push(Segment::Sep);
        let text_seg = if side == Side::X { Segment::XText } else { Segment::YText };
        token_ids.extend_from_slice(&text.tokens[..keep]);
        segments.extend(std::iter::repeat_n(text_seg, keep));
        for (index, attr) in text.attributes.iter().enumerate() {
            let sep_position = token_ids.len();
            token_ids.push(SEP);
            segments.push(Segment::Sep);
            let start = token_ids.len();
            token_ids.extend_from_slice(&attr.tokens);
            let seg = if side == Side::X { Segment::XAttr(index) } else { Segment::YAttr(index) };
            segments.extend(std::iter::repeat_n(seg, attr.tokens.len()));
            attr_spans.push(AttrSpan { side, index, start, end: token_ids.len(), sep_position });
        }
    }
    debug_assert_eq!(token_ids.len(), len);
    Ok(LayoutPlan { token_ids, segments, attr_spans, x_sep, y_sep, n_a, n_b, truncated: over })
}
