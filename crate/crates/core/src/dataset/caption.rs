use super::render::{SceneImage, Shape};
use super::style::PatternFamily;

pub const VOCAB_SIZE: usize = 16;

pub const TOK_PAD: u8 = 0;
pub const TOK_DISC: u8 = 1;
pub const TOK_RECTANGLE: u8 = 2;
pub const TOK_TRIANGLE: u8 = 3;
pub const TOK_RED: u8 = 4;
pub const TOK_YELLOW: u8 = 5;
pub const TOK_GREEN: u8 = 6;
pub const TOK_CYAN: u8 = 7;
pub const TOK_BLUE: u8 = 8;
pub const TOK_MAGENTA: u8 = 9;
pub const TOK_GRAY: u8 = 10;
pub const TOK_STRIPES: u8 = 11;
pub const TOK_CHECKER: u8 = 12;
pub const TOK_DOTS: u8 = 13;
pub const TOK_NOISE: u8 = 14;

const WORDS: [&str; 15] = [
    "<pad>", "disc", "rectangle", "triangle", "red", "yellow", "green", "cyan", "blue", "magenta", "gray", "stripes",
    "checker", "dots", "noise",
];

pub fn token_word(tok: u8) -> Option<&'static str> {
    WORDS.get(tok as usize).copied()
}

pub fn word_token(word: &str) -> Option<u8> {
    WORDS.iter().position(|w| *w == word).map(|p| p as u8)
}

/// Hue bucket of the palette's mean color; low-saturation palettes are gray.
pub fn palette_bucket(palette: &[[f32; 3]; 3]) -> u8 {
    let mean: [f32; 3] = std::array::from_fn(|c| palette.iter().map(|p| p[c]).sum::<f32>() / 3.0);
    let max = mean.iter().copied().fold(f32::MIN, f32::max);
    let min = mean.iter().copied().fold(f32::MAX, f32::min);
    let chroma = max - min;
    if chroma < 0.08 {
        return TOK_GRAY;
    }
    let [r, g, b] = mean;
    let hue = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    // Sextants centered on the primaries and secondaries.
    let sextant = ((hue + 0.5).rem_euclid(6.0)) as u8;
    TOK_RED + sextant
}

pub fn family_token(f: PatternFamily) -> u8 {
    match f {
        PatternFamily::Stripes => TOK_STRIPES,
        PatternFamily::Checker => TOK_CHECKER,
        PatternFamily::Dots => TOK_DOTS,
        PatternFamily::ValueNoise => TOK_NOISE,
    }
}

/// Template `<shape> <palette-bucket> <family>`, naming the first shape.
pub fn caption_of(scene: &SceneImage) -> Vec<u8> {
    let shape = scene
        .regions
        .iter()
        .find_map(|r| match r.shape {
            Shape::Background => None,
            Shape::Disc { .. } => Some(TOK_DISC),
            Shape::Rectangle { .. } => Some(TOK_RECTANGLE),
            Shape::Triangle { .. } => Some(TOK_TRIANGLE),
        })
        .unwrap_or(TOK_PAD);
    vec![shape, palette_bucket(&scene.style.palette), family_token(scene.style.family)]
}
