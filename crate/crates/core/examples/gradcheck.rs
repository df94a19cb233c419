//! Checks every analytic gradient against central finite differences, then
//! shows the check catching a deliberately broken derivative rule.

use pfedseq::harness::{gradcheck, GradcheckOptions, Suite};
use pfedseq::numerics::Fault;

fn main() -> pfedseq::Result<()> {
    let report = gradcheck(&[], &GradcheckOptions::default())?;
    for s in &report.suites {
        println!(
            "{:<10?} {:>3} instances {:>6} coords  max rel err {:.2e}  {}",
            s.suite,
            s.instances,
            s.coords_checked,
            s.max_rel_err,
            if s.pass { "pass" } else { "FAIL" }
        );
    }

    let broken = gradcheck(
        &[Suite::Learner],
        &GradcheckOptions {
            instances: 3,
            fault: Some(Fault::SiluDerivative),
            ..Default::default()
        },
    )?;
    println!(
        "with a corrupted SiLU derivative: max rel err {:.2e}, pass = {}",
        broken.suites[0].max_rel_err, broken.pass
    );
    Ok(())
}
