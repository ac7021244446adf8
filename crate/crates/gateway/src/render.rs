//! 8-bit PNG rendering of single-channel artifacts.

use std::str::FromStr;

pub use cfagent_core::colormap::{quantize, HEAT};
use cfagent_core::ImageArtifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    #[default]
    Gray,
    Heat,
}

impl FromStr for Colormap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gray" => Ok(Colormap::Gray),
            "heat" => Ok(Colormap::Heat),
            other => Err(format!("unknown colormap {other}")),
        }
    }
}

pub fn render_png(image: &ImageArtifact, map: Colormap) -> Vec<u8> {
    let levels = image.pixels.iter().map(|&v| quantize(v));
    let (color, data): (png::ColorType, Vec<u8>) = match map {
        Colormap::Gray => (png::ColorType::Grayscale, levels.collect()),
        Colormap::Heat => (png::ColorType::Rgb, levels.flat_map(|q| HEAT[q as usize]).collect()),
    };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width, image.height);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header into memory");
        writer.write_image_data(&data).expect("png data into memory");
    }
    out
}
