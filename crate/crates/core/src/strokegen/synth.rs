//! Compositional synthetic alphabet: characters built from two radicals in
//! left-right, top-bottom or enclosing layouts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{render_full, CharacterSpec, Image, Stroke, StrokeClass, GLYPH_BOX};
use crate::error::{Result, SaeError};

/// A short stroke program in unit coordinates (`[0, 1]²`, y down).
#[derive(Clone, Debug, PartialEq)]
pub struct Radical {
    pub name: String,
    pub strokes: Vec<(StrokeClass, Vec<[f64; 2]>)>,
}

impl Radical {
    fn new(name: &str, strokes: &[(u8, &[[f64; 2]])]) -> Self {
        Radical {
            name: name.into(),
            strokes: strokes
                .iter()
                .map(|(c, p)| (StrokeClass(*c), p.to_vec()))
                .collect(),
        }
    }

    /// The radical drawn alone, filling the same margin box as a character.
    pub fn to_spec(&self) -> CharacterSpec {
        CharacterSpec { label: self.name.clone(), strokes: self.place(FULL) }
    }

    fn place(&self, b: [f64; 4]) -> Vec<Stroke> {
        self.strokes
            .iter()
            .map(|(class, pts)| Stroke {
                class: *class,
                points: pts
                    .iter()
                    .map(|p| {
                        [
                            (b[0] + p[0] * (b[2] - b[0])) * GLYPH_BOX,
                            (b[1] + p[1] * (b[3] - b[1])) * GLYPH_BOX,
                        ]
                    })
                    .collect(),
            })
            .collect()
    }
}

const FULL: [f64; 4] = [0.06, 0.06, 0.94, 0.94];

/// Twelve hand-designed radicals of one to four strokes.
pub fn builtin_radicals() -> Vec<Radical> {
    vec![
        Radical::new("kou", &[
            (2, &[[0.15, 0.15], [0.15, 0.85]]),
            (5, &[[0.15, 0.15], [0.85, 0.15], [0.85, 0.85]]),
            (1, &[[0.15, 0.85], [0.85, 0.85]]),
        ]),
        Radical::new("shi", &[(1, &[[0.1, 0.5], [0.9, 0.5]]), (2, &[[0.5, 0.1], [0.5, 0.9]])]),
        Radical::new("ren", &[(3, &[[0.5, 0.1], [0.15, 0.9]]), (4, &[[0.45, 0.35], [0.9, 0.9]])]),
        Radical::new("ri", &[
            (2, &[[0.2, 0.1], [0.2, 0.9]]),
            (5, &[[0.2, 0.1], [0.8, 0.1], [0.8, 0.9]]),
            (1, &[[0.2, 0.5], [0.8, 0.5]]),
            (1, &[[0.2, 0.9], [0.8, 0.9]]),
        ]),
        Radical::new("mu", &[
            (1, &[[0.1, 0.35], [0.9, 0.35]]),
            (2, &[[0.5, 0.05], [0.5, 0.95]]),
            (3, &[[0.5, 0.35], [0.1, 0.8]]),
            (4, &[[0.5, 0.35], [0.9, 0.8]]),
        ]),
        Radical::new("shan", &[
            (2, &[[0.5, 0.1], [0.5, 0.85]]),
            (5, &[[0.15, 0.35], [0.15, 0.85], [0.85, 0.85]]),
            (2, &[[0.85, 0.35], [0.85, 0.85]]),
        ]),
        Radical::new("nv", &[
            (5, &[[0.45, 0.1], [0.2, 0.6], [0.8, 0.9]]),
            (3, &[[0.7, 0.3], [0.2, 0.9]]),
            (1, &[[0.1, 0.45], [0.9, 0.45]]),
        ]),
        Radical::new("shui", &[
            (4, &[[0.2, 0.1], [0.35, 0.25]]),
            (4, &[[0.1, 0.4], [0.3, 0.55]]),
            (1, &[[0.1, 0.9], [0.4, 0.65]]),
        ]),
        Radical::new("gong", &[
            (1, &[[0.15, 0.15], [0.85, 0.15]]),
            (2, &[[0.5, 0.15], [0.5, 0.85]]),
            (1, &[[0.05, 0.85], [0.95, 0.85]]),
        ]),
        Radical::new("yi", &[(5, &[[0.15, 0.15], [0.8, 0.15], [0.2, 0.85], [0.9, 0.85]])]),
        Radical::new("ba", &[(3, &[[0.4, 0.2], [0.1, 0.85]]), (4, &[[0.6, 0.2], [0.9, 0.85]])]),
        Radical::new("tu", &[
            (1, &[[0.2, 0.4], [0.8, 0.4]]),
            (2, &[[0.5, 0.1], [0.5, 0.85]]),
            (1, &[[0.05, 0.85], [0.95, 0.85]]),
        ]),
    ]
}

/// Random one-to-four stroke radical for alphabets larger than the built-in set.
fn procedural_radical(index: usize, rng: &mut ChaCha8Rng) -> Radical {
    let n = rng.gen_range(1..=4);
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let strokes = (0..n)
        .map(|_| {
            let class = StrokeClass(u(1.0, 6.0) as u8);
            let pts = match class.0 {
                1 => {
                    let y = u(0.1, 0.9);
                    vec![[u(0.05, 0.3), y], [u(0.7, 0.95), y]]
                }
                2 => {
                    let x = u(0.1, 0.9);
                    vec![[x, u(0.05, 0.3)], [x, u(0.7, 0.95)]]
                }
                3 => vec![[u(0.5, 0.9), u(0.05, 0.4)], [u(0.05, 0.4), u(0.6, 0.95)]],
                4 => vec![[u(0.1, 0.5), u(0.05, 0.4)], [u(0.6, 0.95), u(0.6, 0.95)]],
                _ => {
                    let (x0, y0) = (u(0.05, 0.4), u(0.05, 0.4));
                    let x1 = u(0.6, 0.95);
                    vec![[x0, y0], [x1, y0], [x1, u(0.6, 0.95)]]
                }
            };
            (class, pts)
        })
        .collect();
    Radical { name: format!("r{index:03}"), strokes }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    LeftRight,
    TopBottom,
    Enclosing,
}

impl Layout {
    const ALL: [Layout; 3] = [Layout::LeftRight, Layout::TopBottom, Layout::Enclosing];

    /// Boxes for the first and second radical, as `[x0, y0, x1, y1]` fractions.
    fn boxes(self) -> [[f64; 4]; 2] {
        match self {
            Layout::LeftRight => [[0.06, 0.06, 0.47, 0.94], [0.53, 0.06, 0.94, 0.94]],
            Layout::TopBottom => [[0.06, 0.06, 0.94, 0.47], [0.06, 0.53, 0.94, 0.94]],
            Layout::Enclosing => [FULL, [0.32, 0.32, 0.68, 0.68]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Composition {
    pub layout: Layout,
    pub radicals: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticAlphabet {
    pub radicals: Vec<Radical>,
    pub chars: Vec<CharacterSpec>,
    pub compositions: Vec<Composition>,
}

impl SyntheticAlphabet {
    /// Characters containing radical `r`.
    pub fn users_of(&self, r: usize) -> Vec<usize> {
        (0..self.chars.len())
            .filter(|&c| self.compositions[c].radicals.contains(&r))
            .collect()
    }
}

/// Builds `n_chars` characters from `n_radicals` radicals.
///
/// Layouts cycle left-right, top-bottom, enclosing. Each character takes the
/// unused radical pair with the lowest combined usage so far (ties broken by
/// a seeded shuffle), which spreads every radical over several characters.
pub fn synthetic_alphabet(n_radicals: usize, n_chars: usize, seed: u64) -> Result<SyntheticAlphabet> {
    if n_radicals < 2 || n_chars < n_radicals {
        return Err(SaeError::Config(format!(
            "need n_chars >= n_radicals >= 2, got {n_chars} chars and {n_radicals} radicals"
        )));
    }
    let capacity = 3 * n_radicals * (n_radicals - 1);
    if n_chars > capacity {
        return Err(SaeError::Config(format!(
            "{n_radicals} radicals admit only {capacity} distinct compositions, {n_chars} requested"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radicals = builtin_radicals();
    radicals.truncate(n_radicals);
    for i in radicals.len()..n_radicals {
        radicals.push(procedural_radical(i, &mut rng));
    }

    let mut pairs: Vec<[usize; 2]> = (0..n_radicals)
        .flat_map(|a| (0..n_radicals).filter(move |&b| b != a).map(move |b| [a, b]))
        .collect();
    pairs.shuffle(&mut rng);
    let mut used = vec![[false; 3]; pairs.len()];
    let mut usage = vec![0usize; n_radicals];
    let mut compositions = Vec::with_capacity(n_chars);
    for c in 0..n_chars {
        // Fall through to the next layout when this one is exhausted.
        let (li, pi) = (0..3)
            .map(|o| (c + o) % 3)
            .find_map(|li| {
                (0..pairs.len())
                    .filter(|&p| !used[p][li])
                    .min_by_key(|&p| {
                        let [a, b] = pairs[p];
                        (usage[a] + usage[b], usage[a].max(usage[b]))
                    })
                    .map(|p| (li, p))
            })
            .expect("capacity checked above");
        used[pi][li] = true;
        let [a, b] = pairs[pi];
        usage[a] += 1;
        usage[b] += 1;
        compositions.push(Composition { layout: Layout::ALL[li], radicals: [a, b] });
    }

    let chars = compositions
        .iter()
        .enumerate()
        .map(|(i, comp)| {
            let [ba, bb] = comp.layout.boxes();
            let mut strokes = radicals[comp.radicals[0]].place(ba);
            strokes.extend(radicals[comp.radicals[1]].place(bb));
            CharacterSpec { label: format!("c{i:03}"), strokes }
        })
        .collect();
    Ok(SyntheticAlphabet { radicals, chars, compositions })
}

/// Full render of a radical on its own.
pub fn render_radical(radical: &Radical, size: usize, width: f64) -> Result<Image> {
    render_full(&radical.to_spec(), size, width)
}

/// Gaussian jitter of every polyline point (σ in glyph units), clamped to the
/// glyph box. Stands in for writer-to-writer variation.
pub fn jitter<R: Rng + ?Sized>(spec: &CharacterSpec, sigma: f64, rng: &mut R) -> Result<CharacterSpec> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| SaeError::Range(format!("jitter sigma {sigma}: {e}")))?;
    let strokes = spec
        .strokes
        .iter()
        .map(|s| {
            let shift = [normal.sample(rng) * 0.5, normal.sample(rng) * 0.5];
            Stroke {
                class: s.class,
                points: s
                    .points
                    .iter()
                    .map(|p| {
                        let mut q = [0.0; 2];
                        for k in 0..2 {
                            q[k] = (p[k] + shift[k] + normal.sample(rng)).clamp(0.0, GLYPH_BOX);
                        }
                        q
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(CharacterSpec { label: spec.label.clone(), strokes })
}
