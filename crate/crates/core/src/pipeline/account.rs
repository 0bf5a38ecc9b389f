use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{FlowLayout, PipelineProgram, ResourceModel};
use crate::error::Result;
use crate::tables::TableKind;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub stage: usize,
    pub exact_tables: usize,
    pub ternary_tables: usize,
    pub sram_bits: u64,
    pub tcam_bits: u64,
    pub bus_bits: u64,
    pub alu_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub stages: Vec<StageUsage>,
    pub stages_used: usize,
    pub total_sram_bits: u64,
    pub total_tcam_bits: u64,
    pub max_bus_bits: u64,
    pub phv_bits: u64,
    pub ternary_rules: usize,
    pub payload_rows: usize,
    pub lookups: usize,
    pub flow_layout: Option<FlowLayout>,
    pub stateful_bits_per_flow: u64,
    /// Flows the stateful budget holds at this layout.
    pub flow_capacity: Option<u64>,
    pub sram_pct: f64,
    pub tcam_pct: f64,
    pub bus_pct: f64,
    pub phv_pct: f64,
    pub stage_pct: f64,
}

fn pct(used: u64, limit: u64) -> f64 {
    100.0 * used as f64 / limit as f64
}

pub fn account(program: &PipelineProgram, model: &ResourceModel) -> ResourceReport {
    let mut stages: Vec<StageUsage> = (0..program.stages.len())
        .map(|stage| StageUsage {
            stage,
            ..StageUsage::default()
        })
        .collect();
    let mut rules = 0;
    let mut rows = 0;
    let mut add = |u: &mut StageUsage, t: &crate::tables::MappingTable| {
        match t.kind {
            TableKind::Exact => u.exact_tables += 1,
            TableKind::Ternary => u.ternary_tables += 1,
        }
        u.sram_bits += t.sram_bits();
        u.tcam_bits += t.tcam_bits();
        u.bus_bits += t.payload_bits();
        rules += t.rules.len();
        rows += t.rows.len();
    };
    if let Some(spec) = &program.stream {
        for tok in &spec.tokenizers {
            add(&mut stages[0], &tok.table);
        }
    }
    for (s, stage) in program.stages.iter().enumerate() {
        for apply in &stage.tables {
            add(&mut stages[s], &program.tables[apply.table]);
        }
        stages[s].alu_actions = stage.alu.len();
    }
    let total_sram_bits = stages.iter().map(|s| s.sram_bits).sum();
    let total_tcam_bits = stages.iter().map(|s| s.tcam_bits).sum();
    let max_bus_bits = stages.iter().map(|s| s.bus_bits).max().unwrap_or(0);
    let phv_bits = program.phv_bits() + program.stream.as_ref().map_or(0, |s| s.phv_bits());
    let flow_layout = program.stream.as_ref().map(|s| s.layout());
    let stateful = flow_layout.as_ref().map_or(0, FlowLayout::bits_per_flow);
    let lookups = program.map_count() + program.stream.as_ref().map_or(0, |s| s.tokenizers.len());
    ResourceReport {
        stages_used: stages.len(),
        total_sram_bits,
        total_tcam_bits,
        max_bus_bits,
        phv_bits,
        ternary_rules: rules,
        payload_rows: rows,
        lookups,
        stateful_bits_per_flow: stateful,
        flow_capacity: (stateful > 0).then(|| model.stateful_sram_bits / stateful),
        flow_layout,
        sram_pct: pct(total_sram_bits, model.sram_bits_per_stage * model.stages as u64),
        tcam_pct: pct(total_tcam_bits, model.tcam_bits_per_stage * model.stages as u64),
        bus_pct: pct(max_bus_bits, model.action_bus_bits),
        phv_pct: pct(phv_bits, model.phv_bits),
        stage_pct: pct(stages.len() as u64, model.stages as u64),
        stages,
    }
}

impl ResourceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>7} {:>12} {:>10} {:>6} {:>4}",
            "stage", "exact", "ternary", "sram_bits", "tcam_bits", "bus", "alu"
        );
        for u in &self.stages {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>7} {:>12} {:>10} {:>6} {:>4}",
                u.stage, u.exact_tables, u.ternary_tables, u.sram_bits, u.tcam_bits, u.bus_bits, u.alu_actions
            );
        }
        let _ = writeln!(
            s,
            "total: {} stages ({:.1}%), sram {} bits ({:.2}%), tcam {} bits ({:.2}%), bus max {} bits ({:.1}%), phv {} bits ({:.1}%)",
            self.stages_used,
            self.stage_pct,
            self.total_sram_bits,
            self.sram_pct,
            self.total_tcam_bits,
            self.tcam_pct,
            self.max_bus_bits,
            self.bus_pct,
            self.phv_bits,
            self.phv_pct
        );
        let _ = writeln!(
            s,
            "lookups {}, ternary rules {}, payload rows {}",
            self.lookups, self.ternary_rules, self.payload_rows
        );
        if let Some(layout) = &self.flow_layout {
            let fields: Vec<String> = layout.fields.iter().map(|f| format!("{} {}", f.name, f.bits)).collect();
            let _ = writeln!(s, "flow state: {} bits/flow ({})", self.stateful_bits_per_flow, fields.join(", "));
        }
        s
    }
}
