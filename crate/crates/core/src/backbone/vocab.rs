//! Word-level vocabulary with character fallback.
//!
//! Text is split into pieces: a run of ASCII letters (optionally carrying
//! one leading space), a single special marker, or a single character.
//! Letter runs not in the vocabulary fall back to one token per character.
//! Concatenating token strings reproduces the input exactly for any text
//! whose characters are in the base alphabet.

use std::collections::HashMap;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";
pub const TRAJ_BEGIN: &str = "<|traj_begin|>";
pub const TRAJ_END: &str = "<|traj_end|>";

const SPECIALS: [&str; 5] = [PAD, BOS, UNK, TRAJ_BEGIN, TRAJ_END];
/// Markers recognised inside raw text.
const TEXT_MARKERS: [&str; 2] = [TRAJ_BEGIN, TRAJ_END];

/// Full maze task description with the trajectory slot.
pub const MAZE_PROMPT: &str = "You are a maze navigation expert. Your goal is to reach the destination from your current position using the fewest steps possible. You receive a reward of +1 for reaching the destination; all other positions have a reward of 0. You need to choose the optimal movement to maximize the total reward. Each state at every time step is represented by four values [x, y, vx, vy]:
- (x, y) represents the current position coordinates
- (vx, vy) represents the current velocity
- All values range from [-1.0, 1.0].
The action at each time step is a 2D vector: [ax, ay]
- ax represents the control force (acceleration) applied in the x-axis direction
- ay represents the control force applied in the y-axis direction
- All values range from [-1.0, 1.0].
Each step has a corresponding \"Returns-to-Go\" value, a scalar representing the expected cumulative reward from the current time step to the end of the trajectory.
You will receive trajectory information, including the state sequence, action sequence, and Returns-to-Go sequence for a complete episode, formatted as follows:<|traj_begin|><|traj_end|>
Your task is to learn a policy based on this trajectory data: given the current state and its corresponding Returns-to-Go, predict the optimal action a to take at that time step.
Please explain your understanding of the current policy and output the corresponding action value, along with an explanation.";

/// Short task description used for desk-scale training runs.
pub const COMPACT_PROMPT: &str =
    "Navigate the maze to the goal. Trajectory: <|traj_begin|><|traj_end|> Predict the next action.";

/// Semantically empty probe string for attention analysis.
pub const NULL_PROBE: &str = "z$x-\u{3b1}\u{3b2}hwoqa%^&*()<>?:\"";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// Deterministic vocabulary: specials, the base alphabet, then every word
    /// of the built-in prompts in bare and space-prefixed form.
    pub fn standard() -> Self {
        Self::from_seed_texts(&[MAZE_PROMPT, COMPACT_PROMPT])
    }

    pub fn from_seed_texts(texts: &[&str]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut chars: Vec<char> = (0x20u8..0x7f).map(char::from).collect();
        chars.extend(['\n', '\u{3b1}', '\u{3b2}']);
        tokens.extend(chars.iter().map(|c| c.to_string()));
        let mut words: Vec<String> = Vec::new();
        for text in texts {
            for piece in pieces(text) {
                if let Piece::Word(w) = piece {
                    let bare = w.trim_start_matches(' ');
                    if bare.chars().count() > 1 {
                        words.push(bare.to_string());
                        words.push(format!(" {bare}"));
                    }
                }
            }
        }
        words.sort();
        words.dedup();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn special(&self, s: &str) -> u32 {
        self.index[s]
    }

    pub fn pad_id(&self) -> u32 {
        self.special(PAD)
    }
    pub fn bos_id(&self) -> u32 {
        self.special(BOS)
    }
    pub fn unk_id(&self) -> u32 {
        self.special(UNK)
    }
    pub fn traj_begin_id(&self) -> u32 {
        self.special(TRAJ_BEGIN)
    }
    pub fn traj_end_id(&self) -> u32 {
        self.special(TRAJ_END)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pieces(text) {
            match piece {
                Piece::Marker(m) => out.push(self.special(m)),
                Piece::Char(c) => out.push(self.char_id(c)),
                Piece::Word(w) => match self.id(w) {
                    Some(id) => out.push(id),
                    None => match w.strip_prefix(' ').and_then(|bare| self.id(bare)) {
                        Some(id) => {
                            out.push(self.char_id(' '));
                            out.push(id);
                        }
                        None => out.extend(w.chars().map(|c| self.char_id(c))),
                    },
                },
            }
        }
        out
    }

    fn char_id(&self, c: char) -> u32 {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf)).unwrap_or_else(|| self.unk_id())
    }

    /// Concatenates token strings. Unknown ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect()
    }
}

enum Piece<'a> {
    Marker(&'static str),
    Word(&'a str),
    Char(char),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut i = 0;
    let bytes = text.as_bytes();
    'outer: while i < text.len() {
        let rest = &text[i..];
        for m in TEXT_MARKERS {
            if rest.starts_with(m) {
                out.push(Piece::Marker(m));
                i += m.len();
                continue 'outer;
            }
        }
        let start = i;
        let mut j = i;
        if bytes[j] == b' ' && j + 1 < bytes.len() && bytes[j + 1].is_ascii_alphabetic() {
            j += 1;
        }
        let letters_from = j;
        while j < bytes.len() && bytes[j].is_ascii_alphabetic() {
            j += 1;
        }
        if j > letters_from {
            out.push(Piece::Word(&text[start..j]));
            i = j;
        } else {
            let c = rest.chars().next().expect("non-empty remainder");
            out.push(Piece::Char(c));
            i += c.len_utf8();
        }
    }
    out
}
