//! Parsing of tagged reasoning responses into focus traces.
//!
//! A response is expected to look like
//!
//! ```text
//! <think> ... <focus><ocr>peak=5</ocr><box>[10,20,50,60] legend</box></focus> ... </think>
//! <answer>5</answer>
//! ```
//!
//! Focus events may only appear inside the think section, and each one holds
//! at least one `<ocr>` or `<box>` item. Parsing is total: anything that does
//! not match the grammar comes back as [`FormatClass::Malformed`] with a
//! best-effort answer.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates, optionally labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl BoundingBox {
    /// Builds a box from two corners in any order. Returns `None` when a
    /// coordinate is not finite.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, label: Option<String>) -> Option<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return None;
        }
        Some(Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
            label: label.filter(|l| !l.is_empty()),
        })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Parses the body of a `<box>` item: `[x1,y1,x2,y2]` followed by an
    /// optional free-text label.
    pub fn parse_item(body: &str) -> Option<Self> {
        let body = body.trim();
        let rest = body.strip_prefix('[')?;
        let close = rest.find(']')?;
        let coords: Vec<f64> = rest[..close]
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .ok()?;
        if coords.len() != 4 {
            return None;
        }
        let label = rest[close + 1..].trim();
        let label = (!label.is_empty()).then(|| label.to_string());
        Self::new(coords[0], coords[1], coords[2], coords[3], label)
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)?;
        if let Some(label) = &self.label {
            write!(f, " {label}")?;
        }
        Ok(())
    }
}

/// One `<focus>` block: the OCR snippets and boxes it contains, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FocusEvent {
    pub ocr_texts: Vec<String>,
    pub boxes: Vec<BoundingBox>,
}

impl FocusEvent {
    pub fn is_empty(&self) -> bool {
        self.ocr_texts.is_empty() && self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatClass {
    /// Think/answer envelope with at least one focus event.
    FocusCot,
    /// Think/answer envelope without focus events.
    PlainCot,
    Malformed,
}

impl FormatClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            FormatClass::FocusCot => "focus_cot",
            FormatClass::PlainCot => "plain_cot",
            FormatClass::Malformed => "malformed",
        }
    }
}

impl fmt::Display for FormatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of focused cues in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueCounts {
    pub n_ocr: usize,
    pub n_box: usize,
    /// `(n_ocr + n_box) / 2`
    pub n_info: f64,
}

impl CueCounts {
    pub fn new(n_ocr: usize, n_box: usize) -> Self {
        Self {
            n_ocr,
            n_box,
            n_info: (n_ocr + n_box) as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusTrace {
    /// Raw text between `<think>` and `</think>`, focus markup included.
    pub think_body: String,
    pub events: Vec<FocusEvent>,
    pub answer: String,
    pub format: FormatClass,
}

impl FocusTrace {
    /// OCR snippets pooled across all events.
    pub fn ocr_texts(&self) -> impl Iterator<Item = &str> {
        self.events
            .iter()
            .flat_map(|e| e.ocr_texts.iter().map(String::as_str))
    }

    /// Boxes pooled across all events.
    pub fn boxes(&self) -> impl Iterator<Item = &BoundingBox> {
        self.events.iter().flat_map(|e| e.boxes.iter())
    }

    /// Labels of the boxes that carry one.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.boxes().filter_map(|b| b.label.as_deref())
    }

    pub fn cue_counts(&self) -> CueCounts {
        count_cues(self)
    }

    /// Renders the trace back into the canonical envelope.
    pub fn to_canonical(&self) -> String {
        format!(
            "<think>{}</think><answer>{}</answer>",
            self.think_body, self.answer
        )
    }
}

pub fn count_cues(trace: &FocusTrace) -> CueCounts {
    let n_ocr = trace.events.iter().map(|e| e.ocr_texts.len()).sum();
    let n_box = trace.events.iter().map(|e| e.boxes.len()).sum();
    CueCounts::new(n_ocr, n_box)
}

pub fn classify_format(text: &str) -> FormatClass {
    parse_response(text).format
}

pub fn parse_response(text: &str) -> FocusTrace {
    let pieces = tokenize(text);
    match parse_envelope(text, &pieces) {
        Some((think_body, events, answer)) => {
            let format = if events.is_empty() {
                FormatClass::PlainCot
            } else {
                FormatClass::FocusCot
            };
            FocusTrace {
                think_body: think_body.to_string(),
                events,
                answer,
                format,
            }
        }
        None => FocusTrace {
            think_body: best_effort_think(text, &pieces),
            events: Vec::new(),
            answer: best_effort_answer(text, &pieces),
            format: FormatClass::Malformed,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    Answer,
    Focus,
    Ocr,
    Box,
}

const TAGS: [(Tag, &str); 5] = [
    (Tag::Think, "think"),
    (Tag::Answer, "answer"),
    (Tag::Focus, "focus"),
    (Tag::Ocr, "ocr"),
    (Tag::Box, "box"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Text { start: usize, end: usize },
    Open { tag: Tag, start: usize, end: usize },
    Close { tag: Tag, start: usize, end: usize },
}

fn match_tag(rest: &str) -> Option<(Tag, bool, usize)> {
    let (closing, inner) = match rest.strip_prefix("</") {
        Some(inner) => (true, inner),
        None => (false, rest.strip_prefix('<')?),
    };
    for (tag, name) in TAGS {
        if let Some(after) = inner.strip_prefix(name) {
            if after.starts_with('>') {
                let len = rest.len() - after.len() + 1;
                return Some((tag, closing, len));
            }
        }
    }
    None
}

fn tokenize(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while let Some(off) = text[i..].find('<') {
        let at = i + off;
        match match_tag(&text[at..]) {
            Some((tag, closing, len)) => {
                if at > text_start {
                    pieces.push(Piece::Text {
                        start: text_start,
                        end: at,
                    });
                }
                let end = at + len;
                pieces.push(if closing {
                    Piece::Close { tag, start: at, end }
                } else {
                    Piece::Open { tag, start: at, end }
                });
                text_start = end;
                i = end;
            }
            None => i = at + 1,
        }
    }
    if text_start < text.len() {
        pieces.push(Piece::Text {
            start: text_start,
            end: text.len(),
        });
    }
    pieces
}

struct Cursor<'a> {
    text: &'a str,
    pieces: &'a [Piece],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<Piece> {
        self.pieces.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<Piece> {
        let p = self.peek();
        self.pos += 1;
        p
    }

    fn skip_ws(&mut self) {
        while let Some(Piece::Text { start, end }) = self.peek() {
            if !self.text[start..end].trim().is_empty() {
                break;
            }
            self.pos += 1;
        }
    }

    /// Consumes `<tag> text </tag>` and returns the inner text. The opening
    /// tag must already have been consumed.
    fn item_body(&mut self, tag: Tag) -> Option<&'a str> {
        let body = match self.next()? {
            Piece::Text { start, end } => {
                match self.next()? {
                    Piece::Close { tag: t, .. } if t == tag => {}
                    _ => return None,
                }
                &self.text[start..end]
            }
            Piece::Close { tag: t, .. } if t == tag => "",
            _ => return None,
        };
        Some(body)
    }

    fn focus_event(&mut self) -> Option<FocusEvent> {
        let mut event = FocusEvent::default();
        loop {
            match self.next()? {
                Piece::Text { start, end } if self.text[start..end].trim().is_empty() => {}
                Piece::Open { tag: Tag::Ocr, .. } => {
                    let body = self.item_body(Tag::Ocr)?.trim();
                    if body.is_empty() {
                        return None;
                    }
                    event.ocr_texts.push(body.to_string());
                }
                Piece::Open { tag: Tag::Box, .. } => {
                    let body = self.item_body(Tag::Box)?;
                    event.boxes.push(BoundingBox::parse_item(body)?);
                }
                Piece::Close {
                    tag: Tag::Focus, ..
                } => break,
                _ => return None,
            }
        }
        (!event.is_empty()).then_some(event)
    }
}

fn parse_envelope<'a>(
    text: &'a str,
    pieces: &'a [Piece],
) -> Option<(&'a str, Vec<FocusEvent>, String)> {
    let mut cur = Cursor {
        text,
        pieces,
        pos: 0,
    };
    cur.skip_ws();
    let body_start = match cur.next()? {
        Piece::Open {
            tag: Tag::Think,
            end,
            ..
        } => end,
        _ => return None,
    };
    let mut events = Vec::new();
    let body_end = loop {
        match cur.next()? {
            Piece::Text { .. } => {}
            Piece::Open {
                tag: Tag::Focus, ..
            } => events.push(cur.focus_event()?),
            Piece::Close {
                tag: Tag::Think,
                start,
                ..
            } => break start,
            _ => return None,
        }
    };

    let mut answer = None;
    loop {
        cur.skip_ws();
        match cur.next() {
            None => break,
            Some(Piece::Open {
                tag: Tag::Answer, ..
            }) => answer = Some(cur.item_body(Tag::Answer)?.trim().to_string()),
            Some(_) => return None,
        }
    }
    let answer = answer.filter(|a| !a.is_empty())?;
    Some((&text[body_start..body_end], events, answer))
}

fn best_effort_answer(text: &str, pieces: &[Piece]) -> String {
    let last_close = pieces.iter().rposition(|p| {
        matches!(
            p,
            Piece::Close {
                tag: Tag::Answer,
                ..
            }
        )
    });
    let open_before = |limit: usize| {
        pieces[..limit].iter().rposition(|p| {
            matches!(
                p,
                Piece::Open {
                    tag: Tag::Answer,
                    ..
                }
            )
        })
    };
    if let Some(close) = last_close {
        if let Some(open) = open_before(close) {
            if let (Piece::Open { end, .. }, Piece::Close { start, .. }) =
                (pieces[open], pieces[close])
            {
                return text[end..start].trim().to_string();
            }
        }
    }
    match open_before(pieces.len()) {
        Some(open) => match pieces[open] {
            Piece::Open { end, .. } => text[end..].trim().to_string(),
            _ => String::new(),
        },
        None => String::new(),
    }
}

fn best_effort_think(text: &str, pieces: &[Piece]) -> String {
    let open = pieces.iter().position(|p| {
        matches!(
            p,
            Piece::Open {
                tag: Tag::Think,
                ..
            }
        )
    });
    let Some(open) = open else {
        return String::new();
    };
    let Piece::Open { end: body_start, .. } = pieces[open] else {
        return String::new();
    };
    let close = pieces[open..].iter().find_map(|p| match p {
        Piece::Close {
            tag: Tag::Think,
            start,
            ..
        } => Some(*start),
        _ => None,
    });
    match close {
        Some(end) => text[body_start..end].to_string(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_focus_cot_example() {
        let t = parse_response(
            "<think>A is 5 <focus><ocr>peak=5</ocr><box>[10,20,50,60] legend</box></focus> so 5</think><answer>5</answer>",
        );
        assert_eq!(t.format, FormatClass::FocusCot);
        assert_eq!(t.events.len(), 1);
        assert_eq!(t.events[0].ocr_texts, vec!["peak=5"]);
        assert_eq!(t.events[0].boxes.len(), 1);
        let b = &t.events[0].boxes[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (10.0, 20.0, 50.0, 60.0));
        assert_eq!(b.label.as_deref(), Some("legend"));
        assert_eq!(t.answer, "5");
    }

    #[test]
    fn plain_cot_has_no_events() {
        let t = parse_response("<think>reasoning</think><answer>yes</answer>");
        assert_eq!(t.format, FormatClass::PlainCot);
        assert!(t.events.is_empty());
        assert_eq!(t.answer, "yes");
        assert_eq!(t.think_body, "reasoning");
    }

    #[test]
    fn untagged_text_is_malformed() {
        let t = parse_response("just text no tags");
        assert_eq!(t.format, FormatClass::Malformed);
        assert_eq!(t.answer, "");
    }

    #[test]
    fn unclosed_think_is_malformed() {
        assert_eq!(classify_format("<think>..."), FormatClass::Malformed);
    }

    #[test]
    fn two_events_classify_as_focus_cot() {
        let text = "<think><focus><ocr>a</ocr></focus> x <focus><box>[0,0,1,1]</box></focus></think>\n<answer>1</answer>";
        assert_eq!(classify_format(text), FormatClass::FocusCot);
        let t = parse_response(text);
        assert_eq!(t.events.len(), 2);
        assert_eq!(t.events[1].boxes[0].label, None);
    }

    #[test]
    fn last_answer_block_wins() {
        let t = parse_response("<think>x</think><answer>1</answer> <answer> 2 </answer>");
        assert_eq!(t.format, FormatClass::PlainCot);
        assert_eq!(t.answer, "2");
    }

    #[test]
    fn malformed_keeps_best_effort_answer() {
        let t = parse_response("<answer>5</answer>");
        assert_eq!(t.format, FormatClass::Malformed);
        assert_eq!(t.answer, "5");
        let t = parse_response("<think>x</think> trailing <answer>7");
        assert_eq!(t.format, FormatClass::Malformed);
        assert_eq!(t.answer, "7");
        assert_eq!(t.think_body, "x");
    }

    #[test]
    fn empty_answer_is_malformed() {
        assert_eq!(
            classify_format("<think>x</think><answer>  </answer>"),
            FormatClass::Malformed
        );
    }

    #[test]
    fn broken_focus_events_are_malformed() {
        for text in [
            "<think><focus></focus></think><answer>1</answer>",
            "<think><focus><ocr>a</ocr></think><answer>1</answer>",
            "<think><focus><ocr></ocr></focus></think><answer>1</answer>",
            "<think><focus>chatter<ocr>a</ocr></focus></think><answer>1</answer>",
            "<think><focus><box>10,20,30,40</box></focus></think><answer>1</answer>",
            "<think><focus><box>[1,2,3]</box></focus></think><answer>1</answer>",
            "<think><focus><box>[1,2,3,nan]</box></focus></think><answer>1</answer>",
            "<think><ocr>a</ocr></think><answer>1</answer>",
            "<think>x</think><focus><ocr>a</ocr></focus><answer>1</answer>",
            "<think>x</think><answer>1</answer> tail",
            "prefix <think>x</think><answer>1</answer>",
        ] {
            assert_eq!(classify_format(text), FormatClass::Malformed, "{text}");
        }
    }

    #[test]
    fn degenerate_and_reversed_boxes_are_normalized() {
        let b = BoundingBox::parse_item(" [ 50 , 60,10,20 ]  total ").unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (10.0, 20.0, 50.0, 60.0));
        assert_eq!(b.label.as_deref(), Some("total"));
        let z = BoundingBox::parse_item("[3,3,3,3]").unwrap();
        assert_eq!(z.area(), 0.0);
        let d = BoundingBox::parse_item("[1.5,-2,3e1,4]").unwrap();
        assert_eq!((d.x1, d.y1, d.x2, d.y2), (1.5, -2.0, 30.0, 4.0));
    }

    #[test]
    fn ocr_whitespace_trimmed_but_inner_text_verbatim() {
        let t = parse_response("<think><focus><ocr>  a  =  1 </ocr></focus></think><answer>x</answer>");
        assert_eq!(t.events[0].ocr_texts, vec!["a  =  1"]);
    }

    #[test]
    fn unknown_angle_brackets_are_plain_text() {
        let t = parse_response("<think>if a<b and <i>x</i></think><answer>a<b</answer>");
        assert_eq!(t.format, FormatClass::PlainCot);
        assert_eq!(t.answer, "a<b");
    }

    #[test]
    fn cue_counts() {
        let empty = parse_response("<think>r</think><answer>1</answer>");
        assert_eq!(count_cues(&empty), CueCounts::new(0, 0));
        assert_eq!(count_cues(&empty).n_info, 0.0);

        let t = parse_response(
            "<think><focus><ocr>a</ocr><ocr>b</ocr><box>[0,0,1,1]</box></focus>\
             <focus><ocr>c</ocr><ocr>d</ocr><box>[0,0,2,2] x</box></focus></think><answer>1</answer>",
        );
        let c = count_cues(&t);
        assert_eq!((c.n_ocr, c.n_box, c.n_info), (4, 2, 3.0));

        let t = parse_response("<think><focus><ocr>a</ocr></focus></think><answer>1</answer>");
        let c = count_cues(&t);
        assert_eq!((c.n_ocr, c.n_box, c.n_info), (1, 0, 0.5));
    }

    #[test]
    fn canonical_round_trip() {
        let text = "<think>A <focus><ocr>x=1</ocr><box>[1,2,3,4] lbl</box></focus> B</think><answer>1</answer>";
        let t = parse_response(text);
        assert_eq!(t.to_canonical(), text);
        assert_eq!(parse_response(&t.to_canonical()), t);
    }
}
