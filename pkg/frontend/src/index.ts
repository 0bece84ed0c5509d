/**
 * Thin callable surface over the imloss core for external training
 * stacks: loss forward value and gradient on flat arrays, plus the
 * named hyperparameter presets.
 *
 * This layer reimplements no loss math. Every call marshals flat
 * buffers into SEGT tensor files, invokes the core's command-line
 * interface, and unmarshals the result, so values and gradients are
 * bitwise identical to what the core produces.
 */

import { spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { decodeSegt, encodeSegt } from "./segt.js";

export { decodeSegt, encodeSegt } from "./segt.js";
export type { SegtDtype, SegtTensor } from "./segt.js";

export interface FlatLossRequest {
  /** LossSpec JSON string, e.g. '{"family": "Dice"}' */
  spec: string;
  /** tensor extents, trailing axis = classes */
  shape: number[];
  /** flat row-major logits, length = product(shape) */
  logits: Float64Array;
  /** flat row-major one-hot truth, same length */
  truth: Float64Array;
}

export interface LossResult {
  value: number;
  /** gradient with respect to the logits, flat row-major */
  grad: Float64Array;
}

/** Core rejected the request; carries the core's own validation message. */
export class CoreValidationError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "CoreValidationError";
  }
}

export class CoreInvocationError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "CoreInvocationError";
  }
}

function defaultCommand(): string[] {
  const env = process.env.IMLOSS_CLI;
  if (env && env.trim().length > 0) return env.trim().split(/\s+/);
  return ["imloss"];
}

export interface BindingOptions {
  /** command vector for the core CLI; default from IMLOSS_CLI or ["imloss"] */
  cli?: string[];
}

export class ImlossBindings {
  private readonly cli: string[];

  constructor(options: BindingOptions = {}) {
    this.cli = options.cli ?? defaultCommand();
  }

  private run(args: string[]): string {
    const [cmd, ...prefix] = this.cli;
    const proc = spawnSync(cmd, [...prefix, ...args], { encoding: "utf-8" });
    if (proc.error) {
      throw new CoreInvocationError(
        `failed to invoke core CLI ${JSON.stringify(this.cli)}: ${proc.error.message}`,
      );
    }
    if (proc.status !== 0) {
      const message = (proc.stderr ?? "").trim() || `core exited with ${proc.status}`;
      if (proc.status === 1) throw new CoreValidationError(message);
      throw new CoreInvocationError(message);
    }
    return proc.stdout;
  }

  /** Loss value and gradient (with respect to logits) for one request. */
  lossValueAndGrad(request: FlatLossRequest): LossResult {
    const count = request.shape.reduce((a, b) => a * b, 1);
    if (request.logits.length !== count) {
      throw new CoreValidationError(
        `logits length ${request.logits.length} != product of shape (${count})`,
      );
    }
    if (request.truth.length !== count) {
      throw new CoreValidationError(
        `truth length ${request.truth.length} != product of shape (${count})`,
      );
    }
    const dir = mkdtempSync(join(tmpdir(), "imloss-bind-"));
    try {
      const specPath = join(dir, "spec.json");
      const predPath = join(dir, "logits.segt");
      const truthPath = join(dir, "truth.segt");
      const gradPath = join(dir, "grad.segt");
      writeFileSync(specPath, request.spec);
      writeFileSync(predPath, encodeSegt(request.logits, request.shape));
      writeFileSync(truthPath, encodeSegt(request.truth, request.shape));
      const stdout = this.run([
        "eval",
        "--spec", specPath,
        "--pred", predPath,
        "--truth", truthPath,
        "--logits",
        "--grad", gradPath,
      ]);
      const value = JSON.parse(stdout).value as number;
      const grad = decodeSegt(readFileSync(gradPath));
      if (!(grad.data instanceof Float64Array)) {
        throw new CoreInvocationError(`gradient dtype ${grad.dtype}, expected f64`);
      }
      return { value, grad: grad.data };
    } finally {
      rmSync(dir, { recursive: true, force: true });
    }
  }

  /** The named presets, byte-identical to the core registry JSON. */
  listPresets(): { raw: string; presets: Record<string, Record<string, unknown>> } {
    const raw = this.run(["losses"]);
    return { raw, presets: JSON.parse(raw) };
  }

  /** Core build version string. */
  version(): string {
    const out = this.run(["--version"]).trim();
    const parts = out.split(/\s+/);
    return parts[parts.length - 1];
  }
}

export function lossValueAndGrad(
  request: FlatLossRequest,
  options: BindingOptions = {},
): LossResult {
  return new ImlossBindings(options).lossValueAndGrad(request);
}

export function listPresets(options: BindingOptions = {}) {
  return new ImlossBindings(options).listPresets();
}
