//! The scalar layer equation ẏ = M̄ − (γ/2)y² against its tanh solution.

use backlash::integrator::{boundary_layer_closed_form, integrate_layer_ode};
use backlash::IntegratorConfig;

fn main() -> backlash::Result<()> {
    let cfg = IntegratorConfig {
        rel_tol: 1e-12,
        abs_tol: 1e-14,
        ..IntegratorConfig::default()
    };
    let (m_bar, gamma) = (1.0_f64, 1e4);
    let end = 5.0 / (m_bar * gamma).sqrt();
    let taus: Vec<f64> = (0..=10).map(|i| end * i as f64 / 10.0).collect();
    let num = integrate_layer_ode(m_bar, gamma, &taus, &cfg)?;
    println!("{:>10} {:>14} {:>14} {:>10}", "tau", "numerical", "closed form", "rel err");
    for (tau, y) in taus.iter().zip(&num) {
        let exact = boundary_layer_closed_form(m_bar, gamma, *tau);
        let err = if exact > 0.0 { ((y - exact) / exact).abs() } else { y.abs() };
        println!("{tau:>10.5} {y:>14.8e} {exact:>14.8e} {err:>10.2e}");
    }
    println!("plateau sqrt(2 M/gamma) = {:.8e}", (2.0 * m_bar / gamma).sqrt());
    Ok(())
}
