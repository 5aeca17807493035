//! List the problem corpus.

use anyhow::Result;
use lopt_core::problems::{instantiate, registry_list};

pub fn run() -> Result<i32> {
    println!("{:<22} {:>6} {:>8}  {}", "family", "dim", "sampler", "global_min");
    for template in registry_list() {
        let p = instantiate(&template)?;
        let dims: Vec<String> = p
            .param_shapes()
            .iter()
            .map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
            .collect();
        println!(
            "{:<22} {:>6} {:>8}  {}",
            template.family.name(),
            dims.join("+"),
            if p.has_sampler() { "yes" } else { "no" },
            p.global_min()
                .map(|m| m.to_string())
                .unwrap_or_else(|| "unknown".into()),
        );
    }
    println!("\nextra (evaluation-only): synthetic_mlp, mnist_mlp");
    Ok(0)
}
