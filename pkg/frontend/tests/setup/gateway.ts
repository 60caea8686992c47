/** Boots one demo gateway for the whole suite: builds the bundle (the
 * gateway serves it statically), starts the phantom fixture server, waits
 * until it answers, and hands its URL to tests via .tmp/gateway.json. */

import { execSync, spawn, type ChildProcess } from 'node:child_process';
import { mkdirSync, writeFileSync } from 'node:fs';
import path from 'node:path';
import type { Readable } from 'node:stream';
import { fileURLToPath } from 'node:url';

const FRONTEND = path.resolve(fileURLToPath(new URL('.', import.meta.url)), '..', '..');

interface Fixture {
  url: string;
  annotationCase: string;
}

function onLines(stream: Readable, handle: (line: string) => void): void {
  let buf = '';
  stream.on('data', (chunk) => {
    buf += String(chunk);
    let nl;
    while ((nl = buf.indexOf('\n')) >= 0) {
      handle(buf.slice(0, nl));
      buf = buf.slice(nl + 1);
    }
  });
}

function waitForReady(child: ChildProcess): Promise<Fixture> {
  return new Promise((resolve, reject) => {
    let annotationCase = '';
    const tail: string[] = [];
    onLines(child.stdout as Readable, (line) => {
      tail.push(line);
      if (tail.length > 20) tail.shift();
      if (line.startsWith('ANNOT ')) annotationCase = line.slice(6).trim();
      if (line.startsWith('READY ')) {
        resolve({ url: line.slice(6).trim(), annotationCase });
      }
    });
    child.on('error', reject);
    child.on('exit', (code) => {
      reject(new Error(`fixture server exited early (code ${code}):\n${tail.join('\n')}`));
    });
  });
}

async function waitForHttp(url: string, timeoutMs = 60_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  let lastError = 'no attempt made';
  while (Date.now() < deadline) {
    try {
      const res = await fetch(`${url}/api/cases`);
      if (res.ok) return;
      lastError = `HTTP ${res.status}`;
    } catch (err) {
      lastError = err instanceof Error ? err.message : String(err);
    }
    await new Promise((r) => setTimeout(r, 250));
  }
  throw new Error(`gateway at ${url} never answered: ${lastError}`);
}

export default async function setup(): Promise<() => Promise<void>> {
  // tests assert the gateway serves the built bundle, so build first
  execSync('npm run build', { cwd: FRONTEND, stdio: 'inherit' });

  const script = path.join(FRONTEND, 'tests', 'setup', 'fixture_server.py');
  const child = spawn('python3', [script], { stdio: ['ignore', 'pipe', 'inherit'] });

  const fixture = await waitForReady(child);
  await waitForHttp(fixture.url);

  mkdirSync(path.join(FRONTEND, '.tmp'), { recursive: true });
  writeFileSync(path.join(FRONTEND, '.tmp', 'gateway.json'), JSON.stringify(fixture));

  return async () => {
    child.removeAllListeners('exit');
    const gone = new Promise<void>((resolve) => {
      child.once('exit', () => resolve());
    });
    child.kill('SIGTERM');
    const timer = setTimeout(() => child.kill('SIGKILL'), 5000);
    await gone;
    clearTimeout(timer);
  };
}
