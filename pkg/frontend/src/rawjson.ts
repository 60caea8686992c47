/** JSON parser that keeps each number's literal token. The prediction
 * panel shows server values byte-for-byte; JSON.parse alone loses the
 * distinction between "1.0" and "1", so cells render these tokens. */

export type RawValue =
  | { kind: 'object'; entries: [string, RawValue][] }
  | { kind: 'array'; items: RawValue[] }
  | { kind: 'string'; value: string }
  | { kind: 'number'; token: string }
  | { kind: 'literal'; token: string };

class Cursor {
  constructor(public text: string, public pos = 0) {}

  skipWs(): void {
    while (this.pos < this.text.length && ' \t\n\r'.includes(this.text[this.pos]!)) this.pos++;
  }

  peek(): string {
    const c = this.text[this.pos];
    if (c === undefined) throw new SyntaxError('unexpected end of JSON');
    return c;
  }

  expect(c: string): void {
    if (this.text[this.pos] !== c) {
      throw new SyntaxError(`expected ${c} at position ${this.pos}`);
    }
    this.pos++;
  }
}

function parseString(cur: Cursor): string {
  const start = cur.pos;
  cur.expect('"');
  while (true) {
    const c = cur.peek();
    cur.pos++;
    if (c === '\\') cur.pos++; // skip the escaped character
    else if (c === '"') break;
  }
  // delegate unescaping to the built-in parser on the exact slice
  return JSON.parse(cur.text.slice(start, cur.pos)) as string;
}

const NUMBER_CHARS = '-+0123456789.eE';

function parseNumber(cur: Cursor): RawValue {
  const start = cur.pos;
  while (cur.pos < cur.text.length && NUMBER_CHARS.includes(cur.text[cur.pos]!)) cur.pos++;
  const token = cur.text.slice(start, cur.pos);
  if (!/^-?\d+(\.\d+)?([eE][+-]?\d+)?$/.test(token)) {
    throw new SyntaxError(`bad number token ${token} at position ${start}`);
  }
  return { kind: 'number', token };
}

function parseLiteral(cur: Cursor): RawValue {
  for (const word of ['true', 'false', 'null']) {
    if (cur.text.startsWith(word, cur.pos)) {
      cur.pos += word.length;
      return { kind: 'literal', token: word };
    }
  }
  throw new SyntaxError(`unexpected token at position ${cur.pos}`);
}

function parseValue(cur: Cursor): RawValue {
  cur.skipWs();
  const c = cur.peek();
  if (c === '{') {
    cur.pos++;
    const entries: [string, RawValue][] = [];
    cur.skipWs();
    if (cur.peek() === '}') {
      cur.pos++;
      return { kind: 'object', entries };
    }
    while (true) {
      cur.skipWs();
      const key = parseString(cur);
      cur.skipWs();
      cur.expect(':');
      entries.push([key, parseValue(cur)]);
      cur.skipWs();
      if (cur.peek() === ',') {
        cur.pos++;
        continue;
      }
      cur.expect('}');
      return { kind: 'object', entries };
    }
  }
  if (c === '[') {
    cur.pos++;
    const items: RawValue[] = [];
    cur.skipWs();
    if (cur.peek() === ']') {
      cur.pos++;
      return { kind: 'array', items };
    }
    while (true) {
      items.push(parseValue(cur));
      cur.skipWs();
      if (cur.peek() === ',') {
        cur.pos++;
        continue;
      }
      cur.expect(']');
      return { kind: 'array', items };
    }
  }
  if (c === '"') return { kind: 'string', value: parseString(cur) };
  if (c === '-' || (c >= '0' && c <= '9')) return parseNumber(cur);
  return parseLiteral(cur);
}

export function parseRaw(text: string): RawValue {
  const cur = new Cursor(text);
  const value = parseValue(cur);
  cur.skipWs();
  if (cur.pos !== text.length) {
    throw new SyntaxError(`trailing content at position ${cur.pos}`);
  }
  return value;
}

export function member(value: RawValue, key: string): RawValue {
  if (value.kind !== 'object') throw new TypeError(`expected object for key ${key}`);
  for (const [k, v] of value.entries) {
    if (k === key) return v;
  }
  throw new TypeError(`missing key ${key}`);
}

export function items(value: RawValue): RawValue[] {
  if (value.kind !== 'array') throw new TypeError('expected array');
  return value.items;
}

export function numberToken(value: RawValue): string {
  if (value.kind !== 'number') throw new TypeError('expected number');
  return value.token;
}
