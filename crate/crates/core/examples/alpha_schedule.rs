//! Print the penalty-strength ramp used while sparsifying.

use vsrprune::regularizer::{AlphaSchedule, Phase};

fn main() -> vsrprune::Result<()> {
    let mut s = AlphaSchedule::new(0.02, 0.1, 3, 4)?;
    println!("{} iterations in total", s.total_iterations());
    while s.phase() != Phase::Done {
        s.step();
        println!("iter {:>2}  alpha {:.3}  {:?}", s.iteration, s.alpha, s.phase());
    }
    Ok(())
}
