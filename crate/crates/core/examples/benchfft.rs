use std::time::Instant;
use wcps_core::correlation::{Correlator, bin_events, GridParams};
use wcps_core::source::{generate, SourceParams};
use wcps_core::timetag::{TimeTick, correct_frequency};

fn main() {
    // Stream generation timing
    let t0 = Instant::now();
    let params = SourceParams { duration: 12.0, seed: 1, ..SourceParams::default() };
    let (a, b) = generate(&params).unwrap();
    println!("generate 12 s x (192k+182k) = {} + {} events: {:?}", a.len(), b.len(), t0.elapsed());

    let t0 = Instant::now();
    let bc = correct_frequency(&b, 4e-6).unwrap();
    println!("correct_frequency full {} events: {:?}", bc.len(), t0.elapsed());

    for q in [18u32, 20, 21, 22] {
        let n = 1usize << q;
        let mut c = Correlator::new(n).unwrap();
        let grid = GridParams::new(q, TimeTick::from_ns(512), TimeTick::ZERO).unwrap();
        let aw = a.window(TimeTick::ZERO, grid.span());
        let t0 = Instant::now();
        let ta = bin_events(&aw, &grid);
        let bin_t = t0.elapsed();
        let t0 = Instant::now();
        let sa = c.spectrum(&ta).unwrap();
        let fft_t = t0.elapsed();
        let t0 = Instant::now();
        let out = c.cross_from_spectra(&sa, &sa).unwrap();
        let cross_t = t0.elapsed();
        let t0 = Instant::now();
        let mx = out.iter().enumerate().max_by_key(|(_, v)| **v).unwrap();
        let scan_t = t0.elapsed();
        println!("q={q}: bin {:?} (events {}), fft {:?}, conj+ifft+round {:?}, scan {:?} argmax {}", bin_t, aw.len(), fft_t, cross_t, scan_t, mx.0);
    }
}
