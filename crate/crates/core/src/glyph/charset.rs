use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Line segment in unit glyph coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke {
    pub from: [f32; 2],
    pub to: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphShape {
    pub strokes: Vec<Stroke>,
}

/// Registry of procedural glyph shapes, each bound to one printable character.
#[derive(Debug, Clone)]
pub struct CharacterSet {
    shapes: Vec<GlyphShape>,
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

const ANCHORS: [f32; 3] = [0.2, 0.5, 0.8];

/// Lattice edges between 8-connected anchors of the 3x3 grid (20 edges).
fn lattice_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..9usize {
        for b in (a + 1)..9 {
            let (ax, ay) = ((a % 3) as i32, (a / 3) as i32);
            let (bx, by) = ((b % 3) as i32, (b / 3) as i32);
            if (ax - bx).abs() <= 1 && (ay - by).abs() <= 1 {
                edges.push((a, b));
            }
        }
    }
    edges
}

fn anchor(i: usize) -> [f32; 2] {
    [ANCHORS[i % 3], ANCHORS[i / 3]]
}

impl CharacterSet {
    /// The default 64-shape set bound to `A-Z a-z 0-9 ! ?`.
    pub fn procedural() -> Self {
        let chars: Vec<char> = ('A'..='Z')
            .chain('a'..='z')
            .chain('0'..='9')
            .chain(['!', '?'])
            .collect();
        Self::generate(&chars, 0x6_1_7F)
    }

    /// Generate one distinct stroke set per character from `seed`.
    pub fn generate(chars: &[char], seed: u64) -> Self {
        let edges = lattice_edges();
        let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut shapes = Vec::with_capacity(chars.len());
        for (i, _) in chars.iter().enumerate() {
            let mut r = rng::derived(seed, i as u64);
            loop {
                let count = r.random_range(3..=5);
                let mut pick: Vec<usize> = sample(&mut r, edges.len(), count).into_vec();
                pick.sort_unstable();
                if seen.insert(pick.clone()) {
                    shapes.push(GlyphShape {
                        strokes: pick
                            .iter()
                            .map(|&e| Stroke {
                                from: anchor(edges[e].0),
                                to: anchor(edges[e].1),
                            })
                            .collect(),
                    });
                    break;
                }
            }
        }
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Self {
            shapes,
            chars: chars.to_vec(),
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shape(&self, char_id: u32) -> Result<&GlyphShape> {
        self.shapes
            .get(char_id as usize)
            .ok_or_else(|| Error::Domain(format!("unknown char id {char_id}")))
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, char_id: u32) -> Option<char> {
        self.chars.get(char_id as usize).copied()
    }

    /// Map text to char ids, failing on the first character outside the set.
    /// Whitespace is skipped.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                self.id_of(c)
                    .ok_or_else(|| Error::Domain(format!("character {c:?} not in character set")))
            })
            .collect()
    }
}
