//! Write a volume as gzip NRRD, read it back and compare bits.

use mvseg::nrrd::{read_nrrd, write_nrrd, Encoding};
use mvseg::volume::{Geometry, Vec3, Volume3D};

fn main() -> mvseg::Result<()> {
    let g = Geometry::new([20, 16, 12], [0.5, 0.6, 0.8], Vec3::new(-4.0, 2.0, 1.0), mvseg::volume::Mat3::identity())?;
    let data = (0..g.len()).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
    let v = Volume3D::new(g, data)?;
    let bytes = write_nrrd(&v, Encoding::Gzip)?;
    let back = read_nrrd(&bytes)?.volume;
    let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{} bytes, bit-exact: {same}, checksum {}", bytes.len(), back.checksum());
    Ok(())
}
