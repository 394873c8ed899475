/// An 8-bit RGB image stored row-major as `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

pub type Rgb = [u8; 3];

impl Image {
    pub fn filled(height: usize, width: usize, color: Rgb) -> Self {
        Image {
            height,
            width,
            pixels: color.repeat(height * width),
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == height * width * 3).then_some(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> Rgb {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, color: Rgb) {
        let i = (r * self.width + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }
}
