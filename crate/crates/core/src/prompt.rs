//! Token vocabulary and prompt sequences.
//!
//! Layout: `PAD = 0`, `NULL = 1`, shapes `2..8`, colours `8..14`, cell
//! positions `14..18`, backgrounds `18..21`; ids up to `vocab_size` are
//! reserved. A scene prompt is `[background, (colour, shape, position)*]` in
//! cell order, padded with `PAD`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const NULL: usize = 1;
const SHAPE0: usize = 2;
const COLOR0: usize = 8;
const POS0: usize = 14;
const BG0: usize = 18;
/// Smallest vocabulary that holds every defined token.
pub const MIN_VOCAB: usize = 21;

macro_rules! word_enum {
    ($name:ident, $base:expr, [$($var:ident => $word:literal),+ $(,)?]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn token(self) -> usize {
                $base + self as usize
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$var),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape, SHAPE0, [
    Circle => "circle", Square => "square", Triangle => "triangle",
    Cross => "cross", Ring => "ring", Bar => "bar",
]);
word_enum!(Color, COLOR0, [
    Red => "red", Green => "green", Blue => "blue",
    Yellow => "yellow", Magenta => "magenta", Cyan => "cyan",
]);
word_enum!(Cell, POS0, [
    TopLeft => "top-left", TopRight => "top-right",
    BottomLeft => "bottom-left", BottomRight => "bottom-right",
]);
word_enum!(Background, BG0, [Black => "black", Gray => "gray", Checker => "checker"]);

impl Cell {
    /// `(row, col)` in the 2×2 layout.
    pub fn row_col(self) -> (usize, usize) {
        let i = self as usize;
        (i / 2, i % 2)
    }
}

/// An object class: one shape in one colour. 36 in total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Class {
    pub shape: Shape,
    pub color: Color,
}

impl Class {
    pub const COUNT: usize = 36;

    pub fn index(self) -> usize {
        self.shape.index() * Color::ALL.len() + self.color.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Some(Class {
            shape: Shape::from_index(i / Color::ALL.len())?,
            color: Color::from_index(i % Color::ALL.len())?,
        })
    }

    pub fn all() -> impl Iterator<Item = Class> {
        (0..Self::COUNT).map(|i| Class::from_index(i).unwrap())
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color, self.shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Pad,
    Null,
    Shape,
    Color,
    Position,
    Background,
    Reserved,
}

pub fn role_of(id: usize) -> Role {
    match id {
        PAD => Role::Pad,
        NULL => Role::Null,
        i if (SHAPE0..COLOR0).contains(&i) => Role::Shape,
        i if (COLOR0..POS0).contains(&i) => Role::Color,
        i if (POS0..BG0).contains(&i) => Role::Position,
        i if (BG0..MIN_VOCAB).contains(&i) => Role::Background,
        _ => Role::Reserved,
    }
}

pub fn word_of(id: usize) -> Option<&'static str> {
    match role_of(id) {
        Role::Pad => Some("<pad>"),
        Role::Null => Some("<null>"),
        Role::Shape => Some(Shape::ALL[id - SHAPE0].word()),
        Role::Color => Some(Color::ALL[id - COLOR0].word()),
        Role::Position => Some(Cell::ALL[id - POS0].word()),
        Role::Background => Some(Background::ALL[id - BG0].word()),
        Role::Reserved => None,
    }
}

pub fn token_of_word(w: &str) -> Option<usize> {
    match w {
        "<pad>" => Some(PAD),
        "<null>" => Some(NULL),
        _ => Shape::from_word(w)
            .map(Shape::token)
            .or_else(|| Color::from_word(w).map(Color::token))
            .or_else(|| Cell::from_word(w).map(Cell::token))
            .or_else(|| Background::from_word(w).map(Background::token)),
    }
}

/// Token ids of one prompt, without trailing padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSeq {
    ids: Vec<usize>,
}

impl PromptSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        let mut ids = ids;
        while ids.last() == Some(&PAD) {
            ids.pop();
        }
        PromptSeq { ids }
    }

    /// The unconditional prompt used for guidance.
    pub fn null(len: usize) -> Self {
        PromptSeq { ids: vec![NULL; len] }
    }

    /// `[background, (colour, shape, cell)*]`, objects sorted by cell.
    pub fn scene(background: Background, objects: &[(Class, Cell)]) -> Self {
        let mut objs = objects.to_vec();
        objs.sort_by_key(|o| o.1);
        let mut ids = vec![background.token()];
        for (class, cell) in objs {
            ids.extend([class.color.token(), class.shape.token(), cell.token()]);
        }
        PromptSeq { ids }
    }

    /// Parses whitespace- or comma-separated vocabulary words.
    pub fn parse(text: &str) -> Result<Self> {
        let ids = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| !w.is_empty())
            .map(|w| token_of_word(w).ok_or_else(|| CoreError::Prompt(format!("unknown word {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptSeq::new(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn roles(&self) -> Vec<Role> {
        self.ids.iter().map(|&i| role_of(i)).collect()
    }

    pub fn is_null(&self) -> bool {
        !self.ids.is_empty() && self.ids.iter().all(|&i| i == NULL)
    }

    /// Ids padded with `PAD` to `len`; errors when the prompt is longer or
    /// holds ids outside the vocabulary.
    pub fn padded(&self, len: usize, vocab: usize) -> Result<Vec<usize>> {
        if self.ids.len() > len {
            return Err(CoreError::Prompt(format!(
                "prompt has {} tokens, limit is {len}",
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= vocab) {
            return Err(CoreError::Prompt(format!("token id {bad} >= vocab size {vocab}")));
        }
        let mut out = self.ids.clone();
        out.resize(len, PAD);
        Ok(out)
    }

    /// Position of `word` in this prompt, preferring positions where this
    /// prompt differs from `other`.
    pub fn locate(&self, word: &str, other: Option<&PromptSeq>) -> Result<usize> {
        let id = token_of_word(word).ok_or_else(|| CoreError::Prompt(format!("unknown word {word:?}")))?;
        let hits: Vec<usize> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == id)
            .map(|(i, _)| i)
            .collect();
        let changed = hits
            .iter()
            .copied()
            .find(|&i| other.is_some_and(|o| o.ids.get(i) != Some(&id)));
        changed
            .or(hits.first().copied())
            .ok_or_else(|| CoreError::Prompt(format!("word {word:?} not in prompt \"{self}\"")))
    }
}

impl fmt::Display for PromptSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<String> = self
            .ids
            .iter()
            .map(|&i| word_of(i).map(str::to_string).unwrap_or_else(|| format!("<{i}>")))
            .collect();
        f.write_str(&words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_ranges_are_disjoint() {
        let mut seen = std::collections::BTreeSet::new();
        for s in Shape::ALL {
            assert!(seen.insert(s.token()));
        }
        for c in Color::ALL {
            assert!(seen.insert(c.token()));
        }
        for p in Cell::ALL {
            assert!(seen.insert(p.token()));
        }
        for b in Background::ALL {
            assert!(seen.insert(b.token()));
        }
        assert_eq!(*seen.iter().next().unwrap(), 2);
        assert_eq!(*seen.iter().last().unwrap(), MIN_VOCAB - 1);
    }

    #[test]
    fn scene_prompt_order_and_text() {
        let red_circle = Class {
            shape: Shape::Circle,
            color: Color::Red,
        };
        let blue_bar = Class {
            shape: Shape::Bar,
            color: Color::Blue,
        };
        let p = PromptSeq::scene(
            Background::Gray,
            &[(blue_bar, Cell::BottomRight), (red_circle, Cell::TopLeft)],
        );
        assert_eq!(p.to_string(), "gray red circle top-left blue bar bottom-right");
        assert_eq!(PromptSeq::parse(&p.to_string()).unwrap(), p);
        assert_eq!(p.padded(10, 48).unwrap().len(), 10);
        assert!(p.padded(6, 48).is_err());
    }

    #[test]
    fn locate_prefers_changed_slot() {
        let src = PromptSeq::parse("black red circle top-left red circle top-right").unwrap();
        let tgt = PromptSeq::parse("black red circle top-left red square top-right").unwrap();
        assert_eq!(tgt.locate("square", Some(&src)).unwrap(), 5);
        assert_eq!(tgt.locate("red", Some(&src)).unwrap(), 1);
        assert!(tgt.locate("ring", None).is_err());
    }

    #[test]
    fn class_index_roundtrip() {
        for (i, c) in Class::all().enumerate() {
            assert_eq!(c.index(), i);
        }
    }
}
