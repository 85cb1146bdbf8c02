//! Slow, obviously-correct reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use rand::Rng;

/// Recursive matching-blocks similarity: brute-force longest block (first
/// by start in `a`, then by start in `b`), recurse left and right.
pub fn gestalt_oracle(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * blocks(&a, &b) as f64 / (a.len() + b.len()) as f64
}

fn blocks(a: &[char], b: &[char]) -> usize {
    let (mut bi, mut bj, mut bk) = (0, 0, 0);
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut k = 0;
            while i + k < a.len() && j + k < b.len() && a[i + k] == b[j + k] {
                k += 1;
            }
            if k > bk {
                (bi, bj, bk) = (i, j, k);
            }
        }
    }
    if bk == 0 {
        return 0;
    }
    bk + blocks(&a[..bi], &b[..bj]) + blocks(&a[bi + bk..], &b[bj + bk..])
}

fn iou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cue {
    Ocr(String),
    Box { coords: [i32; 4], label: Option<String> },
}

impl Cue {
    pub fn render(&self) -> String {
        match self {
            Cue::Ocr(t) => format!("<ocr>{t}</ocr>"),
            Cue::Box { coords: [x1, y1, x2, y2], label } => match label {
                Some(l) => format!("<box>[{x1},{y1},{x2},{y2}] {l}</box>"),
                None => format!("<box>[{x1},{y1},{x2},{y2}]</box>"),
            },
        }
    }
}

/// A well-formed focus response citing `cues`, split into focus blocks of
/// at most `per_block` items.
pub fn render_trace(cues: &[Cue], per_block: usize, answer: &str) -> String {
    let mut s = String::from("<think>start ");
    for chunk in cues.chunks(per_block.max(1)) {
        s.push_str("<focus>");
        for c in chunk {
            s.push_str(&c.render());
        }
        s.push_str("</focus> then ");
    }
    s.push_str(&format!("</think><answer>{answer}</answer>"));
    s
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Enumerates every ordered index pair `i < j` of the cue list and files it
/// by kind, then averages whichever penalties exist.
pub fn redundancy_oracle(cues: &[Cue], tau: f64) -> (Option<f64>, Option<f64>, Option<f64>, f64) {
    let mut tt = Vec::new();
    let mut bb = Vec::new();
    for i in 0..cues.len() {
        for j in i + 1..cues.len() {
            match (&cues[i], &cues[j]) {
                (Cue::Ocr(a), Cue::Ocr(b)) => {
                    let s = gestalt_oracle(a, b);
                    if s > tau {
                        tt.push(s);
                    }
                }
                (Cue::Box { coords: a, .. }, Cue::Box { coords: b, .. }) => {
                    bb.push(iou_oracle(a.map(f64::from), b.map(f64::from)));
                }
                _ => {}
            }
        }
    }
    let labels: Vec<&str> = cues
        .iter()
        .filter_map(|c| match c {
            Cue::Box { label: Some(l), .. } => Some(l.as_str()),
            _ => None,
        })
        .collect();
    let mut tb = Vec::new();
    if !labels.is_empty() {
        for c in cues {
            if let Cue::Ocr(t) = c {
                let best = labels.iter().map(|l| gestalt_oracle(t, l)).fold(f64::MIN, f64::max);
                if best > tau {
                    tb.push(best);
                }
            }
        }
    }
    let (p_tt, p_bb, p_tb) = (mean(&tt), mean(&bb), mean(&tb));
    let present: Vec<f64> = [p_tt, p_bb, p_tb].into_iter().flatten().collect();
    (p_tt, p_bb, p_tb, mean(&present).unwrap_or(0.0))
}

/// Small cue alphabet with near-duplicate texts, overlapping boxes and
/// labels that echo OCR texts, so every penalty branch is reachable.
pub fn cue_alphabet() -> Vec<Cue> {
    vec![
        Cue::Ocr("Revenue 2021: 42".into()),
        Cue::Ocr("Revenue 2021: 42.".into()),
        Cue::Ocr("Cost 7".into()),
        Cue::Box { coords: [0, 0, 20, 20], label: Some("Revenue 2021: 42".into()) },
        Cue::Box { coords: [10, 10, 30, 30], label: None },
        Cue::Box { coords: [0, 0, 20, 20], label: Some("Cost".into()) },
    ]
}

pub fn random_string<R: Rng>(rng: &mut R, alphabet: &[char], max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

pub fn random_cue<R: Rng>(rng: &mut R) -> Cue {
    let alphabet: Vec<char> = "ab=1 2".chars().collect();
    if rng.gen_bool(0.5) {
        let mut t = random_string(rng, &alphabet, 10);
        if t.trim().is_empty() {
            t = "a".into();
        }
        // the parser trims item bodies
        Cue::Ocr(t.trim().to_string())
    } else {
        let x1 = rng.gen_range(0..40);
        let y1 = rng.gen_range(0..40);
        let coords = [x1, y1, x1 + rng.gen_range(1..30), y1 + rng.gen_range(1..30)];
        let label = rng.gen_bool(0.6).then(|| {
            let t = random_string(rng, &alphabet, 8);
            if t.trim().is_empty() { "b".to_string() } else { t.trim().to_string() }
        });
        Cue::Box { coords, label }
    }
}
