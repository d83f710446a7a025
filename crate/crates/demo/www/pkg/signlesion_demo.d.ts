/* tslint:disable */
/* eslint-disable */

/**
 * A small CNN trained on the synthetic patterns, with its held-out split.
 */
export class Lab {
    free(): void;
    [Symbol.dispose](): void;
    curve(k: number, layers: number, runs: number): string;
    kernelView(index: number, layers: number): string;
    constructor(seed: number);
    summary(): string;
}

export function exploreBits(value: number, pos: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_lab_free: (a: number, b: number) => void;
    readonly exploreBits: (a: number, b: number) => [number, number, number, number];
    readonly lab_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly lab_kernelView: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lab_new_js: (a: number) => [number, number, number];
    readonly lab_summary: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
