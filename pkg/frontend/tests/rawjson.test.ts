import { describe, expect, it } from 'vitest';

import { items, member, numberToken, parseRaw } from '../src/rawjson.js';

describe('parseRaw', () => {
  it('keeps number tokens exactly as written', () => {
    const doc = parseRaw('{"a": [1.0, 0.30000000000000004, -0.0, 6e-05, 2E+3, 7]}');
    const tokens = items(member(doc, 'a')).map(numberToken);
    expect(tokens).toEqual(['1.0', '0.30000000000000004', '-0.0', '6e-05', '2E+3', '7']);
  });

  it('parses nesting, strings with escapes, and literals', () => {
    const doc = parseRaw('{"s": "a\\"b\\\\c", "arr": [{"x": true}, null, []], "n": {}}');
    const s = member(doc, 's');
    expect(s).toEqual({ kind: 'string', value: 'a"b\\c' });
    const arr = items(member(doc, 'arr'));
    expect(arr).toHaveLength(3);
    expect(member(arr[0]!, 'x')).toEqual({ kind: 'literal', token: 'true' });
    expect(arr[1]).toEqual({ kind: 'literal', token: 'null' });
    expect(items(arr[2]!)).toEqual([]);
    expect(member(doc, 'n')).toEqual({ kind: 'object', entries: [] });
  });

  it('handles whitespace-heavy layouts', () => {
    const doc = parseRaw('\n{\n "p" : [\n  1.50 ,\n  2.25\n ]\n}\n');
    expect(items(member(doc, 'p')).map(numberToken)).toEqual(['1.50', '2.25']);
  });

  it('agrees with JSON.parse on values', () => {
    const raw = '{"F": 4, "p": [0.775, 1.0, 0.0], "label": "viable", "ok": false}';
    const doc = parseRaw(raw);
    const plain = JSON.parse(raw);
    expect(Number(numberToken(member(doc, 'F')))).toBe(plain.F);
    expect(items(member(doc, 'p')).map((v) => Number(numberToken(v)))).toEqual(plain.p);
  });

  it('rejects malformed documents', () => {
    expect(() => parseRaw('{"a": 1,}')).toThrow(SyntaxError);
    expect(() => parseRaw('{"a" 1}')).toThrow(SyntaxError);
    expect(() => parseRaw('[1, 2] trailing')).toThrow(SyntaxError);
    expect(() => parseRaw('{"a": 1.2.3}')).toThrow(SyntaxError);
    expect(() => parseRaw('')).toThrow(SyntaxError);
  });

  it('accessors reject wrong kinds and missing keys', () => {
    const doc = parseRaw('{"a": 1}');
    expect(() => member(doc, 'b')).toThrow(TypeError);
    expect(() => items(doc)).toThrow(TypeError);
    expect(() => numberToken(doc)).toThrow(TypeError);
  });
});
