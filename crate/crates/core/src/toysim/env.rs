//! Symbolic vocabulary and synthetic bar-chart questions.
//!
//! Focus items are atomic tokens: `Ocr(k)` renders as `<ocr>Qk=v</ocr>` and
//! `Box(k)` as `<box>[..] Qk</box>`, reading label, value and bar geometry
//! from the task's chart. Everything else renders literally, so the sampled
//! text goes through the same parser and reward code as real model output.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rewards::{AnswerSpec, AnswerType};
use crate::trace::BoundingBox;

use super::policy::ToyPolicy;

pub const N_KEYS: usize = 6;
const FILLERS: [&str; 8] = ["so", "then", "compare", "the", "value", "is", "check", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    FocusOpen,
    FocusClose,
    Ocr(usize),
    Box(usize),
    Digit(usize),
    Filler(usize),
    Eos,
}

const OCR_BASE: usize = 6;
const BOX_BASE: usize = OCR_BASE + N_KEYS;
const DIGIT_BASE: usize = BOX_BASE + N_KEYS;
const FILLER_BASE: usize = DIGIT_BASE + 10;
const EOS_ID: usize = FILLER_BASE + FILLERS.len();
pub const VOCAB_SIZE: usize = EOS_ID + 1;

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::ThinkOpen => 0,
            Token::ThinkClose => 1,
            Token::AnswerOpen => 2,
            Token::AnswerClose => 3,
            Token::FocusOpen => 4,
            Token::FocusClose => 5,
            Token::Ocr(k) => OCR_BASE + k,
            Token::Box(k) => BOX_BASE + k,
            Token::Digit(d) => DIGIT_BASE + d,
            Token::Filler(f) => FILLER_BASE + f,
            Token::Eos => EOS_ID,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Some(match id {
            0 => Token::ThinkOpen,
            1 => Token::ThinkClose,
            2 => Token::AnswerOpen,
            3 => Token::AnswerClose,
            4 => Token::FocusOpen,
            5 => Token::FocusClose,
            i if i < BOX_BASE => Token::Ocr(i - OCR_BASE),
            i if i < DIGIT_BASE => Token::Box(i - BOX_BASE),
            i if i < FILLER_BASE => Token::Digit(i - DIGIT_BASE),
            i if i < EOS_ID => Token::Filler(i - FILLER_BASE),
            EOS_ID => Token::Eos,
            _ => return None,
        })
    }

    /// Coarse class used for the policy state: each tag is its own class,
    /// focus items share one, digits share one, fillers share one.
    pub fn class(self) -> usize {
        match self {
            Token::Ocr(_) | Token::Box(_) => 6,
            Token::Digit(_) => 7,
            Token::Filler(_) => 8,
            Token::Eos => 9,
            other => other.id(),
        }
    }
}

/// Token classes in id order, as expected by [`ToyPolicy::uniform`].
pub fn token_classes() -> Vec<usize> {
    (0..VOCAB_SIZE)
        .map(|id| Token::from_id(id).expect("id in range").class())
        .collect()
}

/// Uniform policy over the chart vocabulary.
pub fn chart_policy(max_len: usize) -> ToyPolicy {
    ToyPolicy::uniform(token_classes(), max_len, Some(EOS_ID))
}

/// A tiny bar chart and one question about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub labels: Vec<String>,
    pub values: Vec<u32>,
    pub question_key: usize,
}

impl SyntheticTask {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, id: impl Into<String>) -> Self {
        let values = (0..N_KEYS).map(|_| rng.gen_range(0..10)).collect();
        Self {
            id: id.into(),
            labels: (1..=N_KEYS).map(|k| format!("Q{k}")).collect(),
            values,
            question_key: rng.gen_range(0..N_KEYS),
        }
    }

    pub fn question(&self) -> String {
        format!("What is the value of {}?", self.labels[self.question_key])
    }

    pub fn ground_truth(&self) -> String {
        self.values[self.question_key].to_string()
    }

    pub fn answer_spec(&self) -> AnswerSpec {
        AnswerSpec::new(self.ground_truth(), AnswerType::Numeric)
            .expect("integer ground truth always parses")
    }

    /// Pixel box of the bar for key `k` on a 300x220 canvas.
    pub fn bar(&self, k: usize) -> BoundingBox {
        let x1 = 20.0 + 45.0 * k as f64;
        let top = 200.0 - 18.0 * self.values[k] as f64;
        BoundingBox::new(x1, top, x1 + 30.0, 200.0, Some(self.labels[k].clone()))
            .expect("finite bar geometry")
    }

    pub fn render_token(&self, id: usize) -> String {
        match Token::from_id(id) {
            Some(Token::ThinkOpen) => "<think>".into(),
            Some(Token::ThinkClose) => "</think>".into(),
            Some(Token::AnswerOpen) => "<answer>".into(),
            Some(Token::AnswerClose) => "</answer>".into(),
            Some(Token::FocusOpen) => "<focus>".into(),
            Some(Token::FocusClose) => "</focus>".into(),
            Some(Token::Ocr(k)) => format!("<ocr>{}={}</ocr>", self.labels[k], self.values[k]),
            Some(Token::Box(k)) => format!("<box>{}</box>", self.bar(k)),
            Some(Token::Digit(d)) => d.to_string(),
            Some(Token::Filler(f)) => FILLERS[f].to_string(),
            Some(Token::Eos) | None => String::new(),
        }
    }

    /// Text of a sampled sequence. Digits are glued together so that
    /// consecutive digit tokens read as one number.
    pub fn render(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in tokens {
            let piece = self.render_token(id);
            if piece.is_empty() {
                continue;
            }
            let is_digit = matches!(Token::from_id(id), Some(Token::Digit(_)));
            if !out.is_empty() && !(is_digit && prev_digit) {
                out.push(' ');
            }
            out.push_str(&piece);
            prev_digit = is_digit;
        }
        out
    }

    /// A noisy teacher demonstration: mostly well-formed focus reasoning,
    /// with repeated items, wrong answers and unfocused chains mixed in.
    pub fn demonstration<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut seq = vec![Token::ThinkOpen];
        let fillers = |rng: &mut R, seq: &mut Vec<Token>| {
            for _ in 0..rng.gen_range(0..3) {
                seq.push(Token::Filler(rng.gen_range(0..FILLERS.len())));
            }
        };
        fillers(rng, &mut seq);
        if rng.gen_bool(0.85) {
            let blocks = if rng.gen_bool(0.3) { 2 } else { 1 };
            for _ in 0..blocks {
                seq.push(Token::FocusOpen);
                for _ in 0..rng.gen_range(1..=3) {
                    let key = if rng.gen_bool(0.6) {
                        self.question_key
                    } else {
                        *(0..N_KEYS).collect::<Vec<_>>().choose(rng).expect("keys")
                    };
                    seq.push(if rng.gen_bool(0.5) { Token::Ocr(key) } else { Token::Box(key) });
                }
                seq.push(Token::FocusClose);
                fillers(rng, &mut seq);
            }
        }
        seq.push(Token::ThinkClose);
        seq.push(Token::AnswerOpen);
        let answer = if rng.gen_bool(0.4) {
            self.values[self.question_key] as usize
        } else {
            rng.gen_range(0..10)
        };
        seq.push(Token::Digit(answer));
        seq.push(Token::AnswerClose);
        seq.push(Token::Eos);
        seq.into_iter().map(Token::id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{score_response, RewardConfig};
    use crate::trace::{parse_response, FormatClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> SyntheticTask {
        SyntheticTask {
            id: "t".into(),
            labels: (1..=N_KEYS).map(|k| format!("Q{k}")).collect(),
            values: vec![3, 7, 0, 9, 5, 1],
            question_key: 1,
        }
    }

    #[test]
    fn ids_round_trip() {
        assert_eq!(VOCAB_SIZE, 37);
        for id in 0..VOCAB_SIZE {
            assert_eq!(Token::from_id(id).unwrap().id(), id);
        }
        assert_eq!(Token::from_id(VOCAB_SIZE), None);
        assert_eq!(token_classes().len(), VOCAB_SIZE);
    }

    #[test]
    fn renders_parseable_focus_cot() {
        let t = task();
        let seq: Vec<usize> = [
            Token::ThinkOpen,
            Token::Filler(0),
            Token::FocusOpen,
            Token::Ocr(1),
            Token::Box(1),
            Token::FocusClose,
            Token::ThinkClose,
            Token::AnswerOpen,
            Token::Digit(7),
            Token::AnswerClose,
            Token::Eos,
        ]
        .into_iter()
        .map(Token::id)
        .collect();
        let text = t.render(&seq);
        assert_eq!(
            text,
            "<think> so <focus> <ocr>Q2=7</ocr> <box>[65,74,95,200] Q2</box> </focus> </think> <answer> 7 </answer>"
        );
        let trace = parse_response(&text);
        assert_eq!(trace.format, FormatClass::FocusCot);
        let b = score_response(&text, &t.answer_spec(), &RewardConfig::default());
        assert_eq!(b.r_relaxed_acc, 1.0);
        assert_eq!(b.p_redundancy, 0.0);
    }

    #[test]
    fn multi_digit_answers_are_glued() {
        let t = task();
        let seq: Vec<usize> = [Token::AnswerOpen, Token::Digit(1), Token::Digit(2), Token::AnswerClose]
            .into_iter()
            .map(Token::id)
            .collect();
        assert_eq!(t.render(&seq), "<answer> 12 </answer>");
    }

    #[test]
    fn demonstrations_are_well_formed() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let demo = t.demonstration(&mut rng);
            assert!(demo.len() <= 32);
            let f = parse_response(&t.render(&demo)).format;
            assert_ne!(f, FormatClass::Malformed);
        }
    }
}
