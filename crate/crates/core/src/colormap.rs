//! 8-bit quantisation and the heat lookup table used to display
//! single-channel images.

/// `[0, 1]` to `0..=255`, rounding half away from zero.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8
}

const fn ramp(x: i32) -> u8 {
    if x < 0 {
        0
    } else if x > 255 {
        255
    } else {
        x as u8
    }
}

/// Black through red and yellow to white.
pub const fn heat_entry(i: u8) -> [u8; 3] {
    let t = i as i32 * 3;
    [ramp(t), ramp(t - 255), ramp(t - 510)]
}

pub static HEAT: [[u8; 3]; 256] = {
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        lut[i] = heat_entry(i as u8);
        i += 1;
    }
    lut
};

/// Row-major RGBA bytes, gray or heat mapped, for canvas display.
pub fn to_rgba(pixels: &[f32], heat: bool) -> Vec<u8> {
    pixels
        .iter()
        .flat_map(|&v| {
            let q = quantize(v);
            let [r, g, b] = if heat { HEAT[q as usize] } else { [q, q, q] };
            [r, g, b, 255]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_table_is_monotone() {
        assert_eq!(HEAT[0], [0, 0, 0]);
        assert_eq!(HEAT[85], [255, 0, 0]);
        assert_eq!(HEAT[170], [255, 255, 0]);
        assert_eq!(HEAT[255], [255, 255, 255]);
        for w in HEAT.windows(2) {
            assert!((0..3).all(|c| w[1][c] >= w[0][c]));
        }
    }

    #[test]
    fn rgba_is_opaque() {
        let out = to_rgba(&[0.0, 0.5, 1.0, 2.0], false);
        assert_eq!(out, [0, 0, 0, 255, 128, 128, 128, 255, 255, 255, 255, 255, 255, 255, 255, 255]);
        assert_eq!(&to_rgba(&[1.0 / 3.0], true)[..], &[255, 0, 0, 255]);
    }
}
