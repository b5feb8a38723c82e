use std::io::{BufRead, Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::ids::{IdsTree, Structure, SymbolId, SymbolVocabulary};

/// Lattice points per side; point `i` sits at `0.1 + 0.2·i` of the unit box.
pub const LATTICE: u8 = 5;

fn lattice(i: u8) -> f64 {
    0.1 + 0.2 * i as f64
}

/// One pen stroke on the radical lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Line { from: (u8, u8), to: (u8, u8) },
    /// Quarter-radius arc: `radius` lattice steps, angles in octants.
    Arc { center: (u8, u8), radius: u8, start: u8, sweep: u8 },
}

impl Segment {
    /// Polyline approximation in unit-box coordinates.
    fn points(&self) -> Vec<(f64, f64)> {
        match *self {
            Segment::Line { from, to } => vec![(lattice(from.0), lattice(from.1)), (lattice(to.0), lattice(to.1))],
            Segment::Arc { center, radius, start, sweep } => {
                let (cx, cy) = (lattice(center.0), lattice(center.1));
                let r = 0.2 * radius as f64;
                let n = 4 * sweep as usize;
                (0..=n)
                    .map(|k| {
                        let a = std::f64::consts::FRAC_PI_4 * (start as f64 + sweep as f64 * k as f64 / n as f64);
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect()
            }
        }
    }

    fn random(rng: &mut impl Rng) -> Segment {
        if rng.gen_bool(0.7) {
            loop {
                let from = (rng.gen_range(0..LATTICE), rng.gen_range(0..LATTICE));
                let to = (rng.gen_range(0..LATTICE), rng.gen_range(0..LATTICE));
                if from != to {
                    return Segment::Line { from: from.min(to), to: from.max(to) };
                }
            }
        } else {
            Segment::Arc {
                center: (rng.gen_range(1..LATTICE - 1), rng.gen_range(1..LATTICE - 1)),
                radius: 1,
                start: rng.gen_range(0..8),
                sweep: rng.gen_range(2..=6),
            }
        }
    }
}

/// Ordered list of strokes drawn inside a unit box.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrokeProgram {
    pub segments: Vec<Segment>,
}

impl StrokeProgram {
    pub fn random(rng: &mut impl Rng, min_segments: usize, max_segments: usize) -> Self {
        let n = rng.gen_range(min_segments..=max_segments);
        let mut segments: Vec<Segment> = Vec::with_capacity(n);
        while segments.len() < n {
            let s = Segment::random(rng);
            if !segments.contains(&s) {
                segments.push(s);
            }
        }
        StrokeProgram { segments }
    }

    /// A sibling program with exactly one segment added or removed.
    pub fn variant(&self, rng: &mut impl Rng) -> Self {
        let mut segments = self.segments.clone();
        if segments.len() > 2 && rng.gen_bool(0.5) {
            segments.remove(rng.gen_range(0..segments.len()));
        } else {
            loop {
                let s = Segment::random(rng);
                if !segments.contains(&s) {
                    segments.insert(rng.gen_range(0..=segments.len()), s);
                    break;
                }
            }
        }
        StrokeProgram { segments }
    }

    /// Number of segments present in exactly one of the two programs.
    pub fn segment_difference(&self, other: &StrokeProgram) -> usize {
        let only_self = self.segments.iter().filter(|s| !other.segments.contains(s)).count();
        let only_other = other.segments.iter().filter(|s| !self.segments.contains(s)).count();
        only_self + only_other
    }
}

/// A vocabulary radical with its stroke program and stroke-level variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadicalPrimitive {
    pub radical: SymbolId,
    pub program: StrokeProgram,
    /// Variant symbols (appended to the vocabulary) and their programs.
    pub variants: Vec<(SymbolId, StrokeProgram)>,
}

/// Stroke programs for every drawable symbol, indexed by symbol id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlyphSet {
    programs: Vec<Option<StrokeProgram>>,
    primitives: Vec<RadicalPrimitive>,
}

impl GlyphSet {
    pub fn new(primitives: Vec<RadicalPrimitive>) -> Self {
        let mut programs: Vec<Option<StrokeProgram>> = Vec::new();
        let mut set = |id: SymbolId, p: &StrokeProgram| {
            if programs.len() <= id.index() {
                programs.resize(id.index() + 1, None);
            }
            programs[id.index()] = Some(p.clone());
        };
        for prim in &primitives {
            set(prim.radical, &prim.program);
            for (v, p) in &prim.variants {
                set(*v, p);
            }
        }
        GlyphSet { programs, primitives }
    }

    pub fn program(&self, id: SymbolId) -> Option<&StrokeProgram> {
        self.programs.get(id.index()).and_then(Option::as_ref)
    }

    pub fn primitives(&self) -> &[RadicalPrimitive] {
        &self.primitives
    }

    /// Variant symbols of a base radical (empty for variants themselves).
    pub fn variants_of(&self, id: SymbolId) -> Vec<SymbolId> {
        self.primitives.iter().find(|p| p.radical == id).map(|p| p.variants.iter().map(|v| v.0).collect()).unwrap_or_default()
    }

    /// Base radical of a variant symbol.
    pub fn base_of(&self, id: SymbolId) -> Option<SymbolId> {
        self.primitives.iter().find(|p| p.variants.iter().any(|v| v.0 == id)).map(|p| p.radical)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), SynthError> {
        serde_json::to_writer(w, &self.primitives).map_err(|e| SynthError::Format(e.to_string()))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, SynthError> {
        let prims: Vec<RadicalPrimitive> = serde_json::from_reader(r).map_err(|e| SynthError::Format(e.to_string()))?;
        Ok(GlyphSet::new(prims))
    }
}

/// Per-sample writing-style perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub rotation: f64,
    pub shear: f64,
    pub scale: f64,
    /// Stroke width in pixels.
    pub thickness: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl GlyphStyle {
    /// No jitter, no noise.
    pub fn plain(thickness: f64) -> Self {
        GlyphStyle { rotation: 0.0, shear: 0.0, scale: 1.0, thickness, noise: 0.0, seed: 0 }
    }
}

/// Ranges from which per-sample styles are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleRanges {
    pub max_rotation: f64,
    pub max_shear: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub min_thickness: f64,
    pub max_thickness: f64,
    pub noise: f64,
}

impl Default for StyleRanges {
    fn default() -> Self {
        StyleRanges {
            max_rotation: 0.08,
            max_shear: 0.08,
            min_scale: 0.85,
            max_scale: 1.15,
            min_thickness: 1.5,
            max_thickness: 2.5,
            noise: 0.05,
        }
    }
}

impl StyleRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> GlyphStyle {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let span = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        GlyphStyle {
            rotation: sym(rng, self.max_rotation),
            shear: sym(rng, self.max_shear),
            scale: span(rng, self.min_scale, self.max_scale),
            thickness: span(rng, self.min_thickness, self.max_thickness),
            noise: self.noise,
            seed: rng.gen(),
        }
    }
}

/// Square grayscale image, ink = 255, background = 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl GlyphImage {
    /// Intensities in `[0, 1]`, row-major.
    pub fn intensities(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.size + x]
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.size, self.size)?;
        w.write_all(&self.pixels)
    }

    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Self, SynthError> {
        let bad = |m: &str| SynthError::Format(format!("PGM: {m}"));
        let mut header = Vec::new();
        let mut fields: Vec<String> = Vec::new();
        while fields.len() < 4 {
            header.clear();
            if r.read_until(b'\n', &mut header)? == 0 {
                return Err(bad("truncated header"));
            }
            let line = String::from_utf8_lossy(&header);
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap (P5)"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if w != h {
            return Err(bad("image must be square"));
        }
        if fields[3] != "255" {
            return Err(bad("maxval must be 255"));
        }
        let mut pixels = vec![0u8; w * h];
        r.read_exact(&mut pixels).map_err(|_| bad("truncated pixel data"))?;
        Ok(GlyphImage { size: w, pixels })
    }

    /// Builds an image from `[0, 1]` intensities, scaling to 8 bits.
    pub fn from_intensities(size: usize, values: &[f64]) -> Self {
        GlyphImage { size, pixels: values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    /// Sub-box given in fractions of this box.
    pub fn sub(&self, fx0: f64, fy0: f64, fx1: f64, fy1: f64) -> Rect {
        let (w, h) = (self.x1 - self.x0, self.y1 - self.y0);
        Rect { x0: self.x0 + fx0 * w, y0: self.y0 + fy0 * h, x1: self.x0 + fx1 * w, y1: self.y0 + fy1 * h }
    }
}

/// Boxes of the first and second operand of a structure operator.
pub fn layout(op: Structure, r: &Rect) -> (Rect, Rect) {
    use Structure::*;
    let full = *r;
    match op {
        LeftRight => (r.sub(0.0, 0.0, 0.48, 1.0), r.sub(0.52, 0.0, 1.0, 1.0)),
        AboveBelow => (r.sub(0.0, 0.0, 1.0, 0.48), r.sub(0.0, 0.52, 1.0, 1.0)),
        BottomSurround => (full, r.sub(0.25, 0.05, 0.75, 0.7)),
        TopSurround => (full, r.sub(0.25, 0.3, 0.75, 0.95)),
        TopLeftSurround => (full, r.sub(0.3, 0.3, 0.95, 0.95)),
        TopRightSurround => (full, r.sub(0.05, 0.3, 0.7, 0.95)),
        BottomLeftSurround => (full, r.sub(0.3, 0.05, 0.95, 0.7)),
        FullSurround => (full, r.sub(0.25, 0.25, 0.75, 0.75)),
        LeftSurround => (full, r.sub(0.3, 0.25, 0.95, 0.75)),
        Overlaid => (full, full),
    }
}

/// Leaf boxes of a tree, in depth-first order.
pub fn leaf_boxes(
    tree: &IdsTree,
    vocab: &SymbolVocabulary,
    size: usize,
    rect: Rect,
    out: &mut Vec<(SymbolId, Rect)>,
) -> Result<(), SynthError> {
    let min = 4.0 / size as f64;
    if rect.x1 - rect.x0 < min - 1e-9 || rect.y1 - rect.y0 < min - 1e-9 {
        return Err(SynthError::BoxTooSmall { width: (rect.x1 - rect.x0) * size as f64, height: (rect.y1 - rect.y0) * size as f64 });
    }
    match tree {
        IdsTree::Leaf(s) => out.push((*s, rect)),
        IdsTree::Node { op, left, right } => {
            let st = vocab.structure_of(*op).ok_or_else(|| SynthError::Undrawable(vocab.name(*op).to_string()))?;
            let (a, b) = layout(st, &rect);
            leaf_boxes(left, vocab, size, a, out)?;
            leaf_boxes(right, vocab, size, b, out)?;
        }
    }
    Ok(())
}

/// Rasterizes a tree: layout recursion, per-sample affine jitter around the
/// image centre, anti-aliased strokes, additive noise, 8-bit quantization.
pub fn render(
    tree: &IdsTree,
    style: &GlyphStyle,
    vocab: &SymbolVocabulary,
    glyphs: &GlyphSet,
    size: usize,
) -> Result<GlyphImage, SynthError> {
    let mut boxes = Vec::new();
    leaf_boxes(tree, vocab, size, Rect::UNIT, &mut boxes)?;
    let (c, s) = (style.rotation.cos(), style.rotation.sin());
    // rotation · shear, scaled
    let m = [
        [style.scale * c, style.scale * (c * style.shear - s)],
        [style.scale * s, style.scale * (s * style.shear + c)],
    ];
    let to_px = |(x, y): (f64, f64)| {
        let (dx, dy) = (x - 0.5, y - 0.5);
        let tx = 0.5 + m[0][0] * dx + m[0][1] * dy;
        let ty = 0.5 + m[1][0] * dx + m[1][1] * dy;
        (tx * size as f64, ty * size as f64)
    };
    let mut img = vec![0f64; size * size];
    let half = style.thickness / 2.0;
    for (sym, r) in boxes {
        let prog = glyphs.program(sym).ok_or_else(|| SynthError::Undrawable(vocab.name(sym).to_string()))?;
        for seg in &prog.segments {
            let pts: Vec<(f64, f64)> = seg
                .points()
                .into_iter()
                .map(|(u, v)| to_px((r.x0 + u * (r.x1 - r.x0), r.y0 + v * (r.y1 - r.y0))))
                .collect();
            for w in pts.windows(2) {
                draw_segment(&mut img, size, w[0], w[1], half);
            }
        }
    }
    if style.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(style.seed);
        let normal = Normal::new(0.0, style.noise).expect("noise stddev is finite");
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(GlyphImage::from_intensities(size, &img))
}

fn draw_segment(img: &mut [f64], size: usize, a: (f64, f64), b: (f64, f64), half: f64) {
    let reach = half + 1.0;
    let clampi = |v: f64| (v.floor().max(0.0) as usize).min(size.saturating_sub(1));
    let (xlo, xhi) = (clampi(a.0.min(b.0) - reach), clampi(a.0.max(b.0) + reach));
    let (ylo, yhi) = (clampi(a.1.min(b.1) - reach), clampi(a.1.max(b.1) + reach));
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in ylo..=yhi {
        for x in xlo..=xhi {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let d = (qx * qx + qy * qy).sqrt();
            let v = (half + 0.5 - d).clamp(0.0, 1.0);
            let p = &mut img[y * size + x];
            if v > *p {
                *p = v;
            }
        }
    }
}
