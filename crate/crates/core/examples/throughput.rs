//! Non-gating throughput benchmark of the private-chain upload path and
//! local training.
//!
//! `cargo run --release --example throughput -- [workers] [dim] [epochs] [chunk_chars]`
//! The default dimension is the desk-scale network's parameter count.

use fedchain_core::bench::measure;
use fedchain_core::nn::Architecture;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (workers, dim, epochs, chunk) = (arg(0, 10), arg(1, Architecture::desk_default().param_count()), arg(2, 20), arg(3, 13_300));
    match measure(workers, dim, epochs, chunk) {
        Ok(t) => println!("{t}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
