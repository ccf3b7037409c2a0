//! Target sparsity per iteration for each schedule, and the fraction of
//! surviving weights each step has to remove.
//!
//! Run with: cargo run --example sparsity_schedules

use prunekit::schedules::trajectory;
use prunekit::{iteration_prune_fraction, Result, ScheduleKind};

fn main() -> Result<()> {
    let (s0, sf, total) = (0.0, 0.9, 6);
    let kinds = [
        ScheduleKind::OneShot,
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::exponential(),
    ];
    print!("{:<12}", "t");
    for t in 0..=total {
        print!("{t:>8}");
    }
    println!();
    for kind in kinds {
        let traj = trajectory(kind, total, s0, sf)?;
        print!("{:<12}", kind.name());
        for s in &traj {
            print!("{s:>8.4}");
        }
        println!();
        print!("{:<12}", "  fraction");
        print!("{:>8}", "");
        for w in traj.windows(2) {
            print!("{:>8.4}", iteration_prune_fraction(w[0], w[1])?);
        }
        println!();
    }
    Ok(())
}
