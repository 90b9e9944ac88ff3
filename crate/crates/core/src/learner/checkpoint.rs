//! Plain-text checkpoint of every network in a [`CdnetParams`].
//!
//! Layout, one item per line:
//!
//! ```text
//! cdnet-checkpoint 1
//! shape <agents> <state_len> <gain_dim> <hidden> <gain_bound>
//! net <name> <layer count>
//! layer <inputs> <outputs> <activation>
//! <row 0 of W> ... <row outputs-1 of W>   (one line per row)
//! <bias>
//! ```
//!
//! Networks appear in order: `trunk`, then per agent ℓ (1-based) `head.ℓ`,
//! `actor.ℓ`, `critic1.ℓ`, `critic2.ℓ`, `target1.ℓ`, `target2.ℓ`. Numbers use
//! the shortest representation that round-trips exactly.

use std::fmt::Write as _;

use super::nn::{Activation, DenseNet, Layer};
use super::params::{AgentNets, CdnetParams, NetworkShape};
use super::LearnerError;

const MAGIC: &str = "cdnet-checkpoint 1";

fn write_net(out: &mut String, name: &str, net: &DenseNet) {
    let _ = writeln!(out, "net {name} {}", net.layers.len());
    for l in &net.layers {
        let _ = writeln!(out, "layer {} {} {}", l.inputs, l.outputs, l.activation.name());
        for row in l.weights.chunks(l.inputs.max(1)) {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "{}", join(&l.bias));
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub fn dump(params: &CdnetParams) -> String {
    let s = &params.shape;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(
        out,
        "shape {} {} {} {} {:?}",
        s.agents, s.state_len, s.gain_dim, s.hidden, s.gain_bound
    );
    write_net(&mut out, "trunk", &params.trunk);
    for (i, a) in params.agents.iter().enumerate() {
        let id = i + 1;
        write_net(&mut out, &format!("head.{id}"), &a.head);
        write_net(&mut out, &format!("actor.{id}"), &a.actor);
        write_net(&mut out, &format!("critic1.{id}"), &a.critics[0]);
        write_net(&mut out, &format!("critic2.{id}"), &a.critics[1]);
        write_net(&mut out, &format!("target1.{id}"), &a.targets[0]);
        write_net(&mut out, &format!("target2.{id}"), &a.targets[1]);
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), LearnerError> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| LearnerError::Checkpoint("unexpected end of file".into()))
    }

    fn numbers(&mut self, expected: usize) -> Result<Vec<f64>, LearnerError> {
        let (n, line) = self.next()?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| LearnerError::Checkpoint(format!("line {n}: {e}")))?;
        if v.len() != expected {
            return Err(LearnerError::Checkpoint(format!(
                "line {n}: expected {expected} numbers, found {}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn fields(&mut self, keyword: &str, count: usize) -> Result<(usize, Vec<&'a str>), LearnerError> {
        let (n, line) = self.next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&keyword) || parts.len() != count + 1 {
            return Err(LearnerError::Checkpoint(format!("line {n}: expected `{keyword}` record")));
        }
        Ok((n, parts[1..].to_vec()))
    }
}

fn parse<T: std::str::FromStr>(n: usize, s: &str) -> Result<T, LearnerError> {
    s.parse()
        .map_err(|_| LearnerError::Checkpoint(format!("line {n}: cannot parse `{s}`")))
}

fn read_net(lines: &mut Lines<'_>, name: &str) -> Result<DenseNet, LearnerError> {
    let (n, f) = lines.fields("net", 2)?;
    if f[0] != name {
        return Err(LearnerError::Checkpoint(format!("line {n}: expected net `{name}`, found `{}`", f[0])));
    }
    let count: usize = parse(n, f[1])?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, f) = lines.fields("layer", 3)?;
        let inputs: usize = parse(n, f[0])?;
        let outputs: usize = parse(n, f[1])?;
        let activation = Activation::from_name(f[2])
            .ok_or_else(|| LearnerError::Checkpoint(format!("line {n}: unknown activation `{}`", f[2])))?;
        let mut weights = Vec::with_capacity(inputs * outputs);
        for _ in 0..outputs {
            weights.extend(lines.numbers(inputs)?);
        }
        let bias = lines.numbers(outputs)?;
        layers.push(Layer {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        });
    }
    DenseNet::from_layers(layers)
}

pub fn load(text: &str) -> Result<CdnetParams, LearnerError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.next()?;
    if header != MAGIC {
        return Err(LearnerError::Checkpoint("missing checkpoint header".into()));
    }
    let (n, f) = lines.fields("shape", 5)?;
    let shape = NetworkShape {
        agents: parse(n, f[0])?,
        state_len: parse(n, f[1])?,
        gain_dim: parse(n, f[2])?,
        hidden: parse(n, f[3])?,
        gain_bound: parse(n, f[4])?,
    };
    let trunk = read_net(&mut lines, "trunk")?;
    let agents = (1..=shape.agents)
        .map(|id| {
            Ok(AgentNets {
                head: read_net(&mut lines, &format!("head.{id}"))?,
                actor: read_net(&mut lines, &format!("actor.{id}"))?,
                critics: [
                    read_net(&mut lines, &format!("critic1.{id}"))?,
                    read_net(&mut lines, &format!("critic2.{id}"))?,
                ],
                targets: [
                    read_net(&mut lines, &format!("target1.{id}"))?,
                    read_net(&mut lines, &format!("target2.{id}"))?,
                ],
            })
        })
        .collect::<Result<Vec<_>, LearnerError>>()?;
    let params = CdnetParams { shape, trunk, agents };
    if params.trunk.input_dim() != shape.state_len
        || params.agents.iter().any(|a| a.actor.output_dim() != shape.gain_dim)
    {
        return Err(LearnerError::Checkpoint("network sizes disagree with shape".into()));
    }
    Ok(params)
}
