//! Closed-form cost model of [`ClfSeg`](crate::net::ClfSeg).
//!
//! Counts multiply-accumulates for a single image at the configured input
//! size. A convolution costs `out_h·out_w·kh·kw·Cin·Cout` (border taps
//! included), a depthwise convolution `H·W·k²·C`. Normalizations, the fuzzy
//! affine, memberships and gating products cost one operation per element
//! they produce. Additions and activations are free.

use crate::error::Result;
use crate::net::NetworkConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub conv_macs: u64,
    pub norm_ops: u64,
    pub membership_ops: u64,
    pub gating_ops: u64,
    pub params: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.conv_macs + self.norm_ops + self.membership_ops + self.gating_ops
    }

    fn conv(&mut self, h: usize, w: usize, kh: usize, kw: usize, cin: usize, cout: usize) {
        self.conv_macs += (h * w * kh * kw * cin * cout) as u64;
        self.params += (kh * kw * cin * cout + cout) as u64;
    }

    fn depthwise(&mut self, h: usize, w: usize, k: usize, c: usize) {
        self.conv_macs += (h * w * k * k * c) as u64;
        self.params += (k * k * c + c) as u64;
    }

    fn norm(&mut self, h: usize, w: usize, c: usize) {
        self.norm_ops += (h * w * c) as u64;
        self.params += 2 * c as u64;
    }

    fn conv_bn(&mut self, h: usize, w: usize, kh: usize, kw: usize, cin: usize, cout: usize) {
        self.conv(h, w, kh, kw, cin, cout);
        self.norm(h, w, cout);
    }

    fn resnet_block(&mut self, h: usize, w: usize, cin: usize, f: usize) {
        self.conv(h, w, 1, 1, cin, f);
        self.conv_bn(h, w, 3, 3, cin, f);
        self.conv_bn(h, w, 3, 3, f, f);
        self.norm(h, w, f);
    }

    fn glu(&mut self, h: usize, w: usize, cin: usize, cout: usize) {
        let hidden = cin;
        self.conv(h, w, 1, 1, cin, hidden);
        self.conv(h, w, 1, 1, cin, hidden);
        self.depthwise(h, w, 3, hidden);
        self.gating_ops += (h * w * hidden) as u64;
        self.conv(h, w, 1, 1, hidden, cout);
    }

    fn fuzzy(&mut self, h: usize, w: usize, c: usize, sets: usize) {
        // w ⊙ x + b
        self.norm_ops += (h * w * c) as u64;
        self.params += 2 * (h * w * c) as u64;
        self.norm(h, w, c);
        self.membership_ops += (h * w * sets * c) as u64;
        self.params += 2 * sets as u64;
    }

    fn fc_module(&mut self, cfg: &NetworkConfig, stage: usize, cin: usize, f: usize) {
        let (h, w) = cfg.stage_size(stage);
        self.norm(h, w, cin);
        // midscope
        self.conv_bn(h, w, 3, 3, cin, f);
        self.conv_bn(h, w, 3, 3, f, f);
        // widescope
        self.conv_bn(h, w, 3, 3, cin, f);
        self.conv_bn(h, w, 3, 3, f, f);
        self.conv_bn(h, w, 3, 3, f, f);
        // separable
        let n = cfg.separable_n;
        self.conv_bn(h, w, 1, n, cin, f);
        self.conv_bn(h, w, n, 1, f, f);
        for p in 1..=cfg.resnet_paths {
            for k in 0..p {
                self.resnet_block(h, w, if k == 0 { cin } else { f }, f);
            }
        }
        let summary = if cfg.fuzzy_channel_mean { 1 } else { cin };
        if cfg.fuzzy {
            self.fuzzy(h, w, cin, cfg.fuzzy_sets);
        }
        match (cfg.fuzzy, cfg.conv_glu) {
            (_, true) => self.glu(h, w, summary, f),
            (true, false) => self.conv(h, w, 1, 1, summary, f),
            (false, false) => {}
        }
        self.norm(h, w, f);
    }
}

/// Analytic cost of one forward pass of the configured network.
pub fn count_flops(cfg: &NetworkConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let mut r = FlopReport::default();
    for i in 0..cfg.depth {
        let cin = if i == 0 { cfg.in_channels } else { cfg.filters(i) };
        r.fc_module(cfg, i, cin, cfg.filters(i));
        let (h, w) = cfg.stage_size(i + 1);
        r.conv(h, w, 3, 3, cfg.filters(i), cfg.filters(i + 1));
        r.conv(h, w, 3, 3, cin, cfg.filters(i + 1));
    }
    let (h, w) = cfg.stage_size(cfg.depth);
    for _ in 0..cfg.bottleneck_blocks {
        r.resnet_block(h, w, cfg.filters(cfg.depth), cfg.filters(cfg.depth));
    }
    for i in (0..cfg.depth).rev() {
        let (h, w) = cfg.stage_size(i);
        r.conv(h, w, 3, 3, cfg.filters(i + 1), cfg.filters(i));
        r.fc_module(cfg, i, cfg.filters(i), cfg.filters(i));
    }
    r.conv(cfg.height, cfg.width, 1, 1, cfg.filters(0), cfg.classes);
    Ok(r)
}

/// Number of trainable scalars of the configured network.
pub fn count_params(cfg: &NetworkConfig) -> Result<u64> {
    Ok(count_flops(cfg)?.params)
}
