/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_lab_free: (a: number, b: number) => void;
export const exploreBits: (a: number, b: number) => [number, number, number, number];
export const lab_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const lab_kernelView: (a: number, b: number, c: number) => [number, number, number, number];
export const lab_new_js: (a: number) => [number, number, number];
export const lab_summary: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
