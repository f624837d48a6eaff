//! Size accounting for the default model shape at a few strand counts.
use cghair::report::{parameter_accounting, ratio_from_sizes, AccountingConfig, LogitMode};

fn main() {
    for n_s in [2_000, 10_000, 25_000] {
        let cfg = AccountingConfig {
            n_s,
            g: 99,
            n_t: 64,
            k: 10,
            d: 64,
            h: 8,
            sh_degree: 3,
            logit_mode: LogitMode::Index,
        };
        let r = parameter_accounting(&cfg);
        println!(
            "N_S {n_s:>6}: unique {:>8.3} MB, compact {:.3} MB, ratio {:.1}",
            r.unique_mb(),
            r.appearance_mb(),
            r.ratio
        );
    }
    println!("163.7 MB / 0.71 MB -> {:.1}x", ratio_from_sizes(163.7, 0.71));
    let soft = AccountingConfig {
        n_s: 2_000,
        g: 99,
        n_t: 64,
        k: 10,
        d: 64,
        h: 8,
        sh_degree: 3,
        logit_mode: LogitMode::Float,
    };
    print!("{}", parameter_accounting(&soft).to_table());
}
