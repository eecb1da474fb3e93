//! Monte Carlo check that rectification lowers squared error for lambda below the bound.

use tcopilot::theorem_lab::{estimate_moments, lambda0, report_csv, verify_theorem, SyntheticEnsembleSpec};

fn main() -> tcopilot::Result<()> {
    println!("lambda0(0.3, 0.4, 0.2, 0.1) = {}", lambda0(0.3, 0.4, 0.2, 0.1));
    println!("lambda0(0.3, 0.4, 0.4, 0.5) = {}", lambda0(0.3, 0.4, 0.4, 0.5));
    println!("lambda0(0.3, 0.4, 0.5, 0.1) = {}", lambda0(0.3, 0.4, 0.5, 0.1));

    let spec = SyntheticEnsembleSpec::from_moments(0.3, 0.4, 0.2, 0.1);
    let m = estimate_moments(&spec)?;
    println!(
        "estimated eps_P^2 {:.4}  sigma_P^2 {:.4}  eps_C^2 {:.4}  sigma_C^2 {:.4}",
        m.eps_p2, m.sigma_p2, m.eps_c2, m.sigma_c2
    );
    let report = verify_theorem(&spec, &[0.0, 0.1, 0.3, 0.5, 0.8, 1.0, 1.5])?;
    print!("{}", report_csv(&report));

    // a noisy copilot: the bound shrinks well below 1
    let noisy = SyntheticEnsembleSpec::from_moments(0.3, 0.4, 0.4, 0.5);
    let report = verify_theorem(&noisy, &[0.1, 0.2, 0.3, 0.6])?;
    println!("noisy copilot, lambda0 = {}", report.lambda0);
    print!("{}", report_csv(&report));
    Ok(())
}
