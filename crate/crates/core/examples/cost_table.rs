//! Parameter and FLOPs budget of the full-size network at 180x320 input.

use vsrprune::graph::NetworkConfig;
use vsrprune::rewrite::cost;

fn main() {
    let report = cost(&NetworkConfig::paper_scale().build(), (180, 320));
    println!("{}", report.summary());
}
