/** Polygon editing geometry. Coordinates are subpixel image coordinates:
 * pixel (row i, column j) has its center at (j + 0.5, i + 0.5), matching
 * the server's rasterizer. */

export type Point = [number, number];

export const SNAP = 0.25;

/** Snap to the 0.25 px grid so repeated edits produce stable JSON. */
export function snap(value: number): number {
  return Math.round(value / SNAP) * SNAP;
}

export function snapPoint(p: Point): Point {
  return [snap(p[0]), snap(p[1])];
}

function orient(a: Point, b: Point, c: Point): number {
  return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
}

function onSegment(a: Point, b: Point, p: Point): boolean {
  return (
    Math.min(a[0], b[0]) <= p[0] && p[0] <= Math.max(a[0], b[0]) &&
    Math.min(a[1], b[1]) <= p[1] && p[1] <= Math.max(a[1], b[1])
  );
}

function segmentsIntersect(a: Point, b: Point, c: Point, d: Point): boolean {
  const o1 = orient(a, b, c);
  const o2 = orient(a, b, d);
  const o3 = orient(c, d, a);
  const o4 = orient(c, d, b);
  if (((o1 > 0 && o2 < 0) || (o1 < 0 && o2 > 0)) &&
      ((o3 > 0 && o4 < 0) || (o3 < 0 && o4 > 0))) {
    return true;
  }
  if (o1 === 0 && onSegment(a, b, c)) return true;
  if (o2 === 0 && onSegment(a, b, d)) return true;
  if (o3 === 0 && onSegment(c, d, a)) return true;
  if (o4 === 0 && onSegment(c, d, b)) return true;
  return false;
}

/** True when no two non-adjacent edges touch (the server rejects
 * self-intersecting rings, so reject them before the round trip). */
export function isSimple(polygon: Point[]): boolean {
  const n = polygon.length;
  if (n < 3) return false;
  for (let i = 0; i < n; i++) {
    const a = polygon[i]!;
    const b = polygon[(i + 1) % n]!;
    if (a[0] === b[0] && a[1] === b[1]) return false;
    for (let j = i + 1; j < n; j++) {
      // skip the shared-vertex neighbours of edge i
      if (j === i || (j + 1) % n === i || (i + 1) % n === j) continue;
      const c = polygon[j]!;
      const d = polygon[(j + 1) % n]!;
      if (segmentsIntersect(a, b, c, d)) return false;
    }
  }
  return true;
}

/** Even-odd ray crossing test. Points exactly on an edge are not
 * guaranteed either way; editing snaps to quarter-pixel positions so
 * pixel centers stay clear of edges in practice. */
export function pointInPolygon(x: number, y: number, polygon: Point[]): boolean {
  let inside = false;
  const n = polygon.length;
  for (let i = 0, j = n - 1; i < n; j = i++) {
    const [xi, yi] = polygon[i]!;
    const [xj, yj] = polygon[j]!;
    if (yi > y !== yj > y) {
      const xCross = xi + ((y - yi) / (yj - yi)) * (xj - xi);
      if (x < xCross) inside = !inside;
    }
  }
  return inside;
}

/** Brute-force count of pixel centers inside the polygon; the oracle the
 * server's rasterized mask is checked against. */
export function countInteriorPixels(polygon: Point[], width: number, height: number): number {
  let xmin = Infinity, xmax = -Infinity, ymin = Infinity, ymax = -Infinity;
  for (const [x, y] of polygon) {
    xmin = Math.min(xmin, x);
    xmax = Math.max(xmax, x);
    ymin = Math.min(ymin, y);
    ymax = Math.max(ymax, y);
  }
  const j0 = Math.max(0, Math.floor(xmin - 1));
  const j1 = Math.min(width - 1, Math.ceil(xmax + 1));
  const i0 = Math.max(0, Math.floor(ymin - 1));
  const i1 = Math.min(height - 1, Math.ceil(ymax + 1));
  let count = 0;
  for (let i = i0; i <= i1; i++) {
    for (let j = j0; j <= j1; j++) {
      if (pointInPolygon(j + 0.5, i + 0.5, polygon)) count++;
    }
  }
  return count;
}

/** In-progress polygon with undo. Vertices snap on entry. */
export class PolygonDraft {
  private vertices: Point[] = [];
  private history: Point[][] = [];

  get points(): Point[] {
    return this.vertices.map((p) => [p[0], p[1]] as Point);
  }

  get length(): number {
    return this.vertices.length;
  }

  private push(next: Point[]): void {
    this.history.push(this.vertices);
    this.vertices = next;
  }

  add(p: Point): void {
    this.push([...this.vertices, snapPoint(p)]);
  }

  moveVertex(index: number, p: Point): void {
    if (index < 0 || index >= this.vertices.length) return;
    const next = this.points;
    next[index] = snapPoint(p);
    this.push(next);
  }

  removeLast(): void {
    if (this.vertices.length === 0) return;
    this.push(this.vertices.slice(0, -1));
  }

  undo(): boolean {
    const prev = this.history.pop();
    if (prev === undefined) return false;
    this.vertices = prev;
    return true;
  }

  clear(): void {
    if (this.vertices.length === 0) return;
    this.push([]);
  }

  /** Ready to submit: at least a triangle and a simple ring. */
  closable(): boolean {
    return this.vertices.length >= 3 && isSimple(this.vertices);
  }
}
